"""Verifiable desk-scale tasks: Sudoku with unique solutions and a copy task.

Sudoku sequences put the puzzle rows (separated by SEP) first, then BOS, then
the solution rows in the same format. Blank cells are token 0 and digits map
to themselves. The puzzle prefix is the clean (never-noised) part.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .exceptions import IncompleteGrid, MalformedSequence, ParameterOutOfRange, UnreachableDifficulty

PRESETS = {2: {"easy": 12, "medium": 10, "hard": 8}, 3: {"easy": 40, "medium": 35, "hard": 30}}
BLANK = 0


@dataclass(frozen=True)
class SudokuFormat:
    """Token layout for boards with ``box x box`` boxes (side ``box**2``)."""

    box: int = 2

    @property
    def side(self):
        return self.box * self.box

    @property
    def cells(self):
        return self.side * self.side

    @property
    def bos(self):
        return self.side + 1

    @property
    def sep(self):
        return self.side + 2

    @property
    def pad(self):
        return self.side + 3

    @property
    def vocab_size(self):
        return self.side + 4

    @property
    def half_length(self):
        return self.cells + self.side - 1

    @property
    def length(self):
        return 2 * self.half_length + 1

    def clean_mask(self):
        mask = np.zeros(self.length, dtype=bool)
        mask[: self.half_length] = True
        return mask

    def cell_positions(self, part="solution"):
        """Sequence indices of the board cells in the puzzle or solution half."""
        row = np.arange(self.side)
        within = (np.arange(self.side)[:, None] * (self.side + 1) + row[None, :]).reshape(-1)
        return within if part == "puzzle" else within + self.half_length + 1

    def meta(self):
        return {
            "task": "sudoku",
            "box": self.box,
            "vocab_size": self.vocab_size,
            "length": self.length,
            "tokens": {"blank": BLANK, "digits": [1, self.side], "bos": self.bos, "sep": self.sep, "pad": self.pad},
            "clean_prefix": self.half_length,
        }


FOUR = SudokuFormat(2)


@dataclass
class Puzzle:
    grid: np.ndarray
    solution: np.ndarray
    box: int = 2

    @property
    def difficulty(self):
        return int(np.count_nonzero(self.grid))


# ---------------------------------------------------------------- constraints
def _units(box):
    side = box * box
    idx = np.arange(side * side).reshape(side, side)
    rows = [idx[r] for r in range(side)]
    cols = [idx[:, c] for c in range(side)]
    boxes = [idx[r : r + box, c : c + box].reshape(-1) for r in range(0, side, box) for c in range(0, side, box)]
    return rows + cols + boxes


@lru_cache(maxsize=None)
def _peers(box):
    side = box * box
    peers = [set() for _ in range(side * side)]
    for unit in _units(box):
        for i in unit:
            peers[i].update(int(j) for j in unit if j != i)
    return tuple(tuple(sorted(p)) for p in peers)


def _is_complete_valid(flat, box):
    side = box * box
    target = set(range(1, side + 1))
    return all(set(int(v) for v in flat[u]) == target for u in _units(box))


def count_solutions(grid, box=2, limit=2):
    """Backtracking solution count, stopping once ``limit`` is reached."""
    flat = np.asarray(grid, dtype=np.int64).reshape(-1).tolist()
    side = box * box
    peers = _peers(box)
    for i, v in enumerate(flat):
        if v and any(flat[j] == v for j in peers[i]):
            return 0
    found = 0

    def solve():
        nonlocal found
        best, best_c = -1, None
        for i, v in enumerate(flat):
            if v == 0:
                used = {flat[j] for j in peers[i]}
                cand = [d for d in range(1, side + 1) if d not in used]
                if best_c is None or len(cand) < len(best_c):
                    best, best_c = i, cand
                    if len(cand) <= 1:
                        break
        if best < 0:
            found += 1
            return found >= limit
        for d in best_c:
            flat[best] = d
            if solve():
                return True
        flat[best] = 0
        return False

    solve()
    return found


def solve(grid, box=2):
    """Return one completed grid, or ``None`` if the puzzle is infeasible."""
    flat = np.asarray(grid, dtype=np.int64).reshape(-1).copy()
    side = box * box
    peers = _peers(box)

    def rec():
        zeros = np.flatnonzero(flat == 0)
        if len(zeros) == 0:
            return True
        i = int(zeros[0])
        used = {int(flat[j]) for j in peers[i]}
        for d in range(1, side + 1):
            if d not in used:
                flat[i] = d
                if rec():
                    return True
        flat[i] = 0
        return False

    return flat.reshape(side, side) if rec() else None


@lru_cache(maxsize=None)
def all_grids_4x4():
    """Every complete 4x4 grid (there are 288), as a ``(288, 16)`` array."""
    peers = _peers(2)
    out = []
    flat = [0] * 16

    def rec(i):
        if i == 16:
            out.append(list(flat))
            return
        used = {flat[j] for j in peers[i] if j < i}
        for d in range(1, 5):
            if d not in used:
                flat[i] = d
                rec(i + 1)
        flat[i] = 0

    rec(0)
    arr = np.array(out, dtype=np.int64)
    arr.setflags(write=False)
    return arr


def consistent_grids_4x4(grid):
    """Complete 4x4 grids that agree with every given clue."""
    g = np.asarray(grid, dtype=np.int64).reshape(-1)
    grids = all_grids_4x4()
    keep = np.all((grids == g) | (g == 0), axis=1)
    return grids[keep]


def has_unique_solution(grid, box=2):
    if box == 2:
        return len(consistent_grids_4x4(grid)) == 1
    return count_solutions(grid, box, limit=2) == 1


def random_full_grid(box, rng):
    if box == 2:
        grids = all_grids_4x4()
        return grids[rng.integers(len(grids))].reshape(4, 4).copy()
    side = box * box
    peers = _peers(box)
    flat = [0] * (side * side)

    def rec(i):
        if i == side * side:
            return True
        used = {flat[j] for j in peers[i]}
        for d in rng.permutation(side) + 1:
            if d not in used:
                flat[i] = int(d)
                if rec(i + 1):
                    return True
        flat[i] = 0
        return False

    rec(0)
    return np.array(flat, dtype=np.int64).reshape(side, side)


def generate_puzzle(visible, rng, box=2, max_retries=50):
    """Random full grid with cells removed while the solution stays unique."""
    side = box * box
    if not 4 <= visible <= side * side:
        raise ParameterOutOfRange(f"visible count must lie in [4, {side * side}]")
    for _ in range(max_retries):
        solution = random_full_grid(box, rng)
        flat = solution.reshape(-1).copy()
        n_visible = side * side
        for cell in rng.permutation(side * side):
            if n_visible == visible:
                break
            keep = flat[cell]
            flat[cell] = BLANK
            if has_unique_solution(flat, box):
                n_visible -= 1
            else:
                flat[cell] = keep
        if n_visible == visible:
            return Puzzle(flat.reshape(side, side), solution, box)
    raise UnreachableDifficulty(f"could not reach {visible} visible cells with a unique solution")


# ------------------------------------------------------------------ encoding
def _encode_board(board, fmt):
    rows = np.asarray(board, dtype=np.int64).reshape(fmt.side, fmt.side)
    out = []
    for r, row in enumerate(rows):
        if r:
            out.append(fmt.sep)
        out.extend(int(v) for v in row)
    return out


def encode(puzzle):
    """Token sequence and clean mask for a puzzle."""
    fmt = SudokuFormat(puzzle.box)
    tokens = _encode_board(puzzle.grid, fmt) + [fmt.bos] + _encode_board(puzzle.solution, fmt)
    return np.array(tokens, dtype=np.int64), fmt.clean_mask()


def decode(tokens, box=2):
    """Recover ``(puzzle grid, solution grid)``; strict about the layout."""
    fmt = SudokuFormat(box)
    tokens = np.asarray(tokens)
    if tokens.shape != (fmt.length,):
        raise MalformedSequence(f"expected {fmt.length} tokens, got shape {tokens.shape}")
    if tokens[fmt.half_length] != fmt.bos:
        raise MalformedSequence("BOS missing between puzzle and solution")
    for offset in (0, fmt.half_length + 1):
        for r in range(1, fmt.side):
            if tokens[offset + r * (fmt.side + 1) - 1] != fmt.sep:
                raise MalformedSequence("row separator missing")
    grid = tokens[fmt.cell_positions("puzzle")]
    sol = tokens[fmt.cell_positions("solution")]
    if np.any((grid < 0) | (grid > fmt.side)) or np.any((sol < 0) | (sol > fmt.side)):
        raise MalformedSequence("board cell holds a non-digit token")
    return grid.reshape(fmt.side, fmt.side), sol.reshape(fmt.side, fmt.side)


def decode_puzzle(tokens, box=2):
    grid, sol = decode(tokens, box)
    return Puzzle(grid, sol, box)


def _check_complete(grid, side):
    g = np.asarray(grid)
    if g.size != side * side or np.any((g < 1) | (g > side)):
        raise IncompleteGrid("grid must be complete with digits 1..side")


def exact_match(predicted, solution):
    predicted = np.asarray(predicted)
    solution = np.asarray(solution)
    side = int(round(np.sqrt(solution.size)))
    _check_complete(predicted, side)
    _check_complete(solution, side)
    return bool(np.array_equal(predicted.reshape(-1), solution.reshape(-1)))


def is_valid_solution(grid, puzzle, box=2):
    """Complete grid satisfying every constraint and every given clue."""
    side = box * box
    _check_complete(grid, side)
    flat = np.asarray(grid).reshape(-1)
    clues = np.asarray(puzzle).reshape(-1)
    if np.any((clues != BLANK) & (clues != flat)):
        return False
    return _is_complete_valid(flat, box)


def solution_accuracy(predicted_tokens, true_tokens, box=2):
    """Per-sequence exact match on the solution cells (lenient on bad tokens)."""
    pos = SudokuFormat(box).cell_positions("solution")
    p = np.atleast_2d(predicted_tokens)[:, pos]
    t = np.atleast_2d(true_tokens)[:, pos]
    return np.all(p == t, axis=1)


# ------------------------------------------------------------------ datasets
def make_sudoku_dataset(n, visible, rng, box=2, exclude=None):
    """``n`` distinct encoded puzzles, skipping any puzzle grid in ``exclude``."""
    seen = set() if exclude is None else set(exclude)
    rows = []
    attempts = 0
    while len(rows) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise UnreachableDifficulty("not enough distinct puzzles at this difficulty")
        p = generate_puzzle(visible, rng, box)
        key = p.grid.tobytes()
        if key in seen:
            continue
        seen.add(key)
        rows.append(encode(p)[0])
    fmt = SudokuFormat(box)
    return np.array(rows, dtype=np.int64), np.broadcast_to(fmt.clean_mask(), (n, fmt.length)).copy()


def make_splits(n_train, n_eval, visible, rng, box=2):
    """Train and evaluation sets with no puzzle grid in common."""
    x_tr, m_tr = make_sudoku_dataset(n_train, visible, rng, box)
    x_ev, m_ev = make_sudoku_dataset(n_eval, visible, rng, box, exclude=puzzle_keys(x_tr, box))
    return (x_tr, m_tr), (x_ev, m_ev)


def puzzle_keys(tokens, box=2):
    # same byte layout as Puzzle.grid.tobytes() in make_sudoku_dataset
    pos = SudokuFormat(box).cell_positions("puzzle")
    return {np.ascontiguousarray(row[pos], dtype=np.int64).tobytes() for row in np.atleast_2d(tokens)}


def copy_task(length, vocab, rng, n=None):
    """Random prompt (clean) followed by a copy of itself (to be generated)."""
    if length < 2 or length % 2:
        raise ParameterOutOfRange("copy task length must be even and >= 2")
    half = length // 2
    size = (half,) if n is None else (n, half)
    prompt = rng.integers(0, vocab, size=size)
    seq = np.concatenate([prompt, prompt], axis=-1)
    mask = np.zeros(length, dtype=bool)
    mask[:half] = True
    if n is not None:
        mask = np.broadcast_to(mask, (n, length)).copy()
    return seq, mask


def write_dataset(path, tokens, clean_mask, meta):
    """One sequence per line plus a ``.json`` sidecar with layout metadata."""
    path = Path(path)
    tokens = np.atleast_2d(tokens)
    lines = [" ".join(str(int(v)) for v in row) for row in tokens]
    path.write_text("\n".join(lines) + "\n")
    meta = dict(meta)
    meta["clean_mask"] = np.asarray(clean_mask, dtype=bool)[0].astype(int).tolist()
    meta["n_sequences"] = len(tokens)
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_dataset(path):
    path = Path(path)
    rows = [list(map(int, line.split())) for line in path.read_text().splitlines() if line.strip()]
    if not rows:
        raise MalformedSequence(f"{path} holds no sequences")
    if len({len(r) for r in rows}) != 1:
        raise MalformedSequence("sequences have different lengths")
    tokens = np.array(rows, dtype=np.int64)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    mask = np.array(meta.get("clean_mask", [0] * tokens.shape[1]), dtype=bool)
    if mask.shape[0] != tokens.shape[1]:
        raise MalformedSequence("sidecar clean mask length does not match the sequences")
    return tokens, np.broadcast_to(mask, tokens.shape).copy(), meta


__all__ = [
    "PRESETS",
    "SudokuFormat",
    "Puzzle",
    "count_solutions",
    "solve",
    "all_grids_4x4",
    "has_unique_solution",
    "generate_puzzle",
    "encode",
    "decode",
    "exact_match",
    "is_valid_solution",
    "solution_accuracy",
    "make_sudoku_dataset",
    "make_splits",
    "puzzle_keys",
    "copy_task",
    "write_dataset",
    "read_dataset",
]

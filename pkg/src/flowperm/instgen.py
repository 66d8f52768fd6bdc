"""Synthetic task generators with verified ground truth, plus dataset I/O.

Two tasks:

* symmetric assignment instances whose optimal matchings are known by
  construction and re-verified with the exact solver (clean: unique optimum;
  bimodal: exactly two labeled equal-cost optima), and
* a scalar ambiguous-sorting task where one item's observable is a convex
  blend of two well-separated latent values, admitting two valid sorts.

Cost symmetry creates a subtlety the generators must respect: for C = C^T
every permutation ties its own inverse, so a clean instance can only have a
strictly unique optimum when the base permutation is an involution.  Bimodal
instances instead use an unrestricted base permutation and keep only the
constructions whose two labeled matchings survive exact-solver verification;
most candidates fail (the tied block opens cheaper mixed matchings), so the
generator either retries or falls back to a clean instance per config.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .assign import brute_force_min, check_perm, hungarian_min, perm_cost

SCHEMA_VERSION = 1

NOISE_STD = 0.25
BONUS_LO, BONUS_HI = 1.5, 2.5
TIE_EXTRA_LO, TIE_EXTRA_HI = 0.5, 1.5
OBS_NOISE_STD = 0.02
MIN_BLEND_GAP = 3
ALPHA_CLIP = (0.2, 0.8)

_GEN_RETRIES = 64
_BIMODAL_RETRIES = 512  # verification survival is ~20% at n=8, ~2% at n=20


class DatasetVersionError(ValueError):
    """Dataset file declares an unsupported schema version."""


@dataclass(eq=False)
class SlapInstance:
    """Symmetric assignment instance with its verified optimal modes."""

    n: int
    cost: np.ndarray
    modes: list[np.ndarray]
    optimal_cost: float
    kind: str  # "clean" | "bimodal"
    uid: int = 0

    def context(self) -> np.ndarray:
        """Observable vector for the encoder: flattened cost, scaled to ~[-1, 1]."""
        return self.cost.ravel() * 0.25

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SlapInstance)
            and self.n == other.n
            and self.kind == other.kind
            and self.uid == other.uid
            and self.optimal_cost == other.optimal_cost
            and np.array_equal(self.cost, other.cost)
            and len(self.modes) == len(other.modes)
            and all(np.array_equal(a, b) for a, b in zip(self.modes, other.modes))
        )


@dataclass(eq=False)
class SortInstance:
    """Feature sequence to sort ascending; ambiguous ones blend one item."""

    n: int
    features: np.ndarray
    modes: list[np.ndarray]
    alpha: float | None
    kind: str  # "clean" | "ambiguous"
    uid: int = 0

    def context(self) -> np.ndarray:
        """Observable vector for the encoder: features scaled to ~[-1, 1]."""
        return self.features * (2.0 / self.n) - 1.0

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SortInstance)
            and self.n == other.n
            and self.kind == other.kind
            and self.uid == other.uid
            and self.alpha == other.alpha
            and np.array_equal(self.features, other.features)
            and len(self.modes) == len(other.modes)
            and all(np.array_equal(a, b) for a, b in zip(self.modes, other.modes))
        )


def _random_involution(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random self-inverse permutation: disjoint 2-cycles plus fixed points."""
    order = rng.permutation(n)
    assign = np.empty(n, dtype=np.int64)
    i = 0
    while i < n:
        if i + 1 < n and rng.random() < 0.7:
            a, b = order[i], order[i + 1]
            assign[a], assign[b] = b, a
            i += 2
        else:
            assign[order[i]] = order[i]
            i += 1
    return assign


def _symmetric_noise_base(n: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.normal(0.0, NOISE_STD, size=(n, n))
    return (raw + raw.T) / 2.0


def _write_symmetric(cost: np.ndarray, r: int, c: int, value: float, add: bool) -> None:
    """Apply a structured write to (r, c) and its transpose, once each."""
    if add:
        cost[r, c] += value
        if r != c:
            cost[c, r] += value
    else:
        cost[r, c] = value
        if r != c:
            cost[c, r] = value


def gen_slap_clean(n: int, rng: np.random.Generator) -> SlapInstance:
    """Symmetric cost with a strictly unique labeled optimum.

    A symmetric noise base gets one distinct large negative bonus per row at
    the target column, written symmetrically.  The target is an involution so
    that no inverse twin ties it; the exact solver confirms the labeled
    optimum and a failed confirmation regenerates.
    """
    if n < 4:
        raise ValueError("n must be at least 4")
    for _ in range(_GEN_RETRIES):
        p_a = _random_involution(n, rng)
        cost = _symmetric_noise_base(n, rng)
        bonuses = rng.uniform(BONUS_LO, BONUS_HI, size=n)
        for k in range(n):
            _write_symmetric(cost, k, p_a[k], -bonuses[k], add=True)
        solved, total = hungarian_min(cost)
        labeled = perm_cost(cost, p_a)
        if np.array_equal(solved, p_a) and total == labeled:
            return SlapInstance(n, cost, [p_a], labeled, "clean")
    raise RuntimeError("gen_slap_clean: retry budget exhausted (generator bug)")


def gen_slap_bimodal(
    n: int,
    rng: np.random.Generator,
    on_fail: str = "retry",
) -> SlapInstance:
    """Symmetric cost with two labeled equal-cost optimal matchings.

    Two rows i, j of a random base permutation swap assignments to form the
    second mode; the four critical entries and their transposes are set last
    to one common tie value strictly below every bonus, so the two labeled
    costs are identical in floating point.  Both modes are verified against
    the exact solver (cost match within 1e-9); most raw constructions fail
    that check because the tied block admits cheaper mixed matchings.  On
    failure, behavior follows on_fail: "retry" draws a fresh construction
    until one survives, "fallback" returns a clean instance instead.
    """
    if n < 4:
        raise ValueError("n must be at least 4")
    if on_fail not in ("retry", "fallback"):
        raise ValueError("on_fail must be 'retry' or 'fallback'")
    for _ in range(_BIMODAL_RETRIES):
        p_a = rng.permutation(n).astype(np.int64)
        i, j = rng.choice(n, size=2, replace=False)
        p_b = p_a.copy()
        p_b[i], p_b[j] = p_a[j], p_a[i]
        cost = _symmetric_noise_base(n, rng)
        bonuses = rng.uniform(BONUS_LO, BONUS_HI, size=n)
        for k in range(n):
            if k != i and k != j:
                _write_symmetric(cost, k, p_a[k], -bonuses[k], add=True)
        c_tie = -(BONUS_HI + rng.uniform(TIE_EXTRA_LO, TIE_EXTRA_HI))
        for r, c in {(i, p_a[i]), (j, p_a[j]), (i, p_b[i]), (j, p_b[j])}:
            _write_symmetric(cost, r, c, c_tie, add=False)
        cost_a = perm_cost(cost, p_a)
        cost_b = perm_cost(cost, p_b)
        _, total = hungarian_min(cost)
        if cost_a == cost_b and abs(total - cost_a) <= 1e-9 and not np.array_equal(p_a, p_b):
            return SlapInstance(n, cost, [p_a, p_b], cost_a, "bimodal")
        if on_fail == "fallback":
            return gen_slap_clean(n, rng)
    raise RuntimeError("gen_slap_bimodal: retry budget exhausted (generator bug)")


def gen_sort_instance(n: int, ambiguous: bool, rng: np.random.Generator) -> SortInstance:
    """Sequence of noisy scalar features whose ascending sort is the target.

    Latent values are n distinct integers on the grid {0..n}; observables add
    N(0, 0.02) noise on that unit spacing.  An ambiguous instance replaces one
    item's observable with the convex blend alpha*v_a + (1-alpha)*v_b of two
    latent values at least 3 grid positions apart (alpha ~ Beta(2,2) clipped
    to [0.2, 0.8]); the remaining items carry every other grid value, so both
    identifications admit valid, distinct ascending sorts.
    """
    if n < 3:
        raise ValueError("n must be at least 3")
    grid = np.arange(n + 1)
    if not ambiguous:
        values = rng.choice(grid, size=n, replace=False).astype(np.float64)
        features = values + rng.normal(0.0, OBS_NOISE_STD, size=n)
        mode = np.argsort(values).astype(np.int64)
        return SortInstance(n, features, [mode], None, "clean")

    pairs = [(a, b) for a in grid for b in grid if a != b and abs(a - b) >= MIN_BLEND_GAP]
    v_a, v_b = pairs[rng.integers(len(pairs))]
    others = np.array([v for v in grid if v != v_a and v != v_b], dtype=np.float64)
    order = rng.permutation(n)
    blend_pos = int(order[0])
    alpha = float(np.clip(rng.beta(2.0, 2.0), *ALPHA_CLIP))

    features = np.empty(n)
    latent_a = np.empty(n)
    latent_b = np.empty(n)
    others_shuffled = others[rng.permutation(n - 1)]
    slot = 0
    for pos in range(n):
        if pos == blend_pos:
            features[pos] = alpha * v_a + (1.0 - alpha) * v_b
            latent_a[pos] = v_a
            latent_b[pos] = v_b
        else:
            v = others_shuffled[slot]
            slot += 1
            features[pos] = v + rng.normal(0.0, OBS_NOISE_STD)
            latent_a[pos] = v
            latent_b[pos] = v
    mode_a = np.argsort(latent_a).astype(np.int64)
    mode_b = np.argsort(latent_b).astype(np.int64)
    return SortInstance(n, features, [mode_a, mode_b], alpha, "ambiguous")


def verify_slap_instance(inst: SlapInstance, exhaustive: bool = False) -> None:
    """Re-check a stored assignment instance; raises ValueError on violation."""
    if not np.array_equal(inst.cost, inst.cost.T):
        raise ValueError(f"instance {inst.uid}: cost is not exactly symmetric")
    for m in inst.modes:
        check_perm(m)
        if abs(perm_cost(inst.cost, m) - inst.optimal_cost) > 1e-9:
            raise ValueError(f"instance {inst.uid}: labeled mode misses optimal_cost")
    _, total = hungarian_min(inst.cost)
    if abs(total - inst.optimal_cost) > 1e-9:
        raise ValueError(f"instance {inst.uid}: optimal_cost is not the true optimum")
    if inst.kind == "bimodal":
        if len(inst.modes) != 2:
            raise ValueError(f"instance {inst.uid}: bimodal needs exactly 2 modes")
        diff = int((inst.modes[0] != inst.modes[1]).sum())
        if diff != 2:
            raise ValueError(f"instance {inst.uid}: modes differ in {diff} rows, not 2")
    elif len(inst.modes) != 1:
        raise ValueError(f"instance {inst.uid}: clean needs exactly 1 mode")
    if exhaustive and inst.n <= 9:
        _, bf_total = brute_force_min(inst.cost)
        if abs(bf_total - inst.optimal_cost) > 1e-9:
            raise ValueError(f"instance {inst.uid}: brute force found a cheaper matching")


def verify_sort_instance(inst: SortInstance) -> None:
    """Re-check a stored sorting instance; raises ValueError on violation."""
    for m in inst.modes:
        check_perm(m)
    if inst.kind == "ambiguous":
        if len(inst.modes) != 2 or inst.alpha is None:
            raise ValueError(f"instance {inst.uid}: ambiguous needs 2 modes and alpha")
        if not (ALPHA_CLIP[0] <= inst.alpha <= ALPHA_CLIP[1]):
            raise ValueError(f"instance {inst.uid}: alpha {inst.alpha} out of range")
    else:
        if len(inst.modes) != 1 or inst.alpha is not None:
            raise ValueError(f"instance {inst.uid}: clean needs 1 mode and no alpha")


@dataclass
class GenStats:
    """Aggregate construction log for a generated dataset."""

    bimodal_requested: int = 0
    bimodal_built: int = 0
    fallbacks: int = 0

    def as_dict(self) -> dict:
        return {
            "bimodal_requested": self.bimodal_requested,
            "bimodal_built": self.bimodal_built,
            "fallbacks": self.fallbacks,
        }


def gen_slap_dataset(
    n: int,
    count: int,
    bimodal_fraction: float,
    rng: np.random.Generator,
    on_fail: str = "retry",
    start_uid: int = 0,
) -> tuple[list[SlapInstance], GenStats]:
    """Mixed clean/bimodal dataset; bimodal slots come first in uid order."""
    if not 0.0 <= bimodal_fraction <= 1.0:
        raise ValueError("bimodal_fraction must lie in [0, 1]")
    n_bimodal = round(count * bimodal_fraction)
    stats = GenStats(bimodal_requested=n_bimodal)
    out = []
    for idx in range(count):
        if idx < n_bimodal:
            inst = gen_slap_bimodal(n, rng, on_fail=on_fail)
            if inst.kind == "bimodal":
                stats.bimodal_built += 1
            else:
                stats.fallbacks += 1
        else:
            inst = gen_slap_clean(n, rng)
        inst.uid = start_uid + idx
        out.append(inst)
    return out, stats


def gen_sort_dataset(
    n: int,
    count: int,
    ambiguous_fraction: float,
    rng: np.random.Generator,
    start_uid: int = 0,
) -> tuple[list[SortInstance], GenStats]:
    """Mixed clean/ambiguous sorting dataset; ambiguous slots come first."""
    if not 0.0 <= ambiguous_fraction <= 1.0:
        raise ValueError("ambiguous_fraction must lie in [0, 1]")
    n_amb = round(count * ambiguous_fraction)
    stats = GenStats(bimodal_requested=n_amb, bimodal_built=n_amb)
    out = []
    for idx in range(count):
        inst = gen_sort_instance(n, idx < n_amb, rng)
        inst.uid = start_uid + idx
        out.append(inst)
    return out, stats


def _instance_record(inst) -> dict:
    if isinstance(inst, SlapInstance):
        return {
            "task": "slap",
            "kind": inst.kind,
            "n": inst.n,
            "uid": inst.uid,
            "cost": inst.cost.tolist(),
            "modes": [m.tolist() for m in inst.modes],
            "optimal_cost": inst.optimal_cost,
        }
    if isinstance(inst, SortInstance):
        rec = {
            "task": "sort",
            "kind": inst.kind,
            "n": inst.n,
            "uid": inst.uid,
            "features": inst.features.tolist(),
            "modes": [m.tolist() for m in inst.modes],
        }
        if inst.alpha is not None:
            rec["alpha"] = inst.alpha
        return rec
    raise TypeError(f"unsupported instance type {type(inst)!r}")


def _instance_from_record(rec: dict):
    modes = [np.asarray(m, dtype=np.int64) for m in rec["modes"]]
    if rec["task"] == "slap":
        return SlapInstance(
            n=rec["n"],
            cost=np.asarray(rec["cost"], dtype=np.float64),
            modes=modes,
            optimal_cost=rec["optimal_cost"],
            kind=rec["kind"],
            uid=rec["uid"],
        )
    if rec["task"] == "sort":
        return SortInstance(
            n=rec["n"],
            features=np.asarray(rec["features"], dtype=np.float64),
            modes=modes,
            alpha=rec.get("alpha"),
            kind=rec["kind"],
            uid=rec["uid"],
        )
    raise ValueError(f"unknown task {rec['task']!r}")


def write_dataset(instances: list, path, seed: int | None = None, meta: dict | None = None) -> None:
    """Write instances as a headered line-delimited JSON file.

    JSON float serialization uses shortest round-trip repr, so a write/read
    cycle reproduces every field bit-exactly and identical inputs produce
    byte-identical files.
    """
    counts: dict[str, int] = {}
    for inst in instances:
        counts[inst.kind] = counts.get(inst.kind, 0) + 1
    header = {
        "schema_version": SCHEMA_VERSION,
        "count": len(instances),
        "counts": counts,
        "seed": seed,
    }
    if instances:
        header["task"] = "slap" if isinstance(instances[0], SlapInstance) else "sort"
        header["n"] = instances[0].n
    if meta:
        header["meta"] = meta
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for inst in instances:
            fh.write(json.dumps(_instance_record(inst), sort_keys=True) + "\n")


def read_header(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a dataset file (bad header)") from exc
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetVersionError(
            f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}"
        )
    return header


def read_dataset(path) -> list:
    """Read a dataset file back into instance objects (header validated)."""
    header = read_header(path)
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                out.append(_instance_from_record(json.loads(line)))
    if len(out) != header["count"]:
        raise ValueError(f"{path}: header promises {header['count']} records, found {len(out)}")
    return out


def verify_dataset(path, exhaustive: bool = False) -> int:
    """Re-check every instance in a dataset file; returns the instance count."""
    instances = read_dataset(path)
    for inst in instances:
        if isinstance(inst, SlapInstance):
            verify_slap_instance(inst, exhaustive=exhaustive)
        else:
            verify_sort_instance(inst)
    return len(instances)

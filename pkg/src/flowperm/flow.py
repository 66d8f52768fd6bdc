"""Flow-matching core: coupling, path sampling, training, and ODE inference.

Training regresses the velocity model onto the constant displacement from a
noisy feasible start toward its nearest valid target permutation; inference
integrates the learned field with Euler steps from fresh noisy starts and
rounds the endpoints.  Because every velocity passes through the tangent
projector, the row/column-sum constraints hold along the whole trajectory as
an algebraic identity, and the sampler asserts (rather than restores) that.
"""

from dataclasses import dataclass, field

import numpy as np

from .assign import NumericError, perm_matrix, round_to_perm
from .matgeo import center, frobenius_dist, noisy_uniform_batch


@dataclass
class TrainConfig:
    """Knobs for training and sampling.

    sigma_path scales the path perturbation as sigma_path*(1-t), vanishing at
    the target end so endpoint supervision stays exact; this schedule is an
    artifact decision, exposed rather than hard-coded.
    """

    sigma0: float = 0.5
    sigma_path: float = 0.1
    euler_steps: int = 20
    samples_k: int = 10
    epochs: int = 50
    batch_size: int = 128
    seed: int = 42
    base_lr: float = 3e-4
    floor_lr: float = 1e-5
    weight_decay: float = 1e-4
    val_every: int = 5
    feasibility_tol: float = 1e-8
    unit_frobenius: bool = True

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma_path < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.euler_steps < 1 or self.samples_k < 1:
            raise ValueError("euler_steps and samples_k must be at least 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


@dataclass
class SampleSet:
    """K rounded samples for one instance plus trajectory diagnostics."""

    instance_uid: int
    perms: list[np.ndarray]
    residuals: np.ndarray  # per-trajectory max row/col-sum deviation observed
    endpoints: np.ndarray | None = field(default=None, repr=False)


def nearest_target(x0: np.ndarray, modes: list[np.ndarray]) -> np.ndarray:
    """The mode whose one-hot matrix is Frobenius-closest to x0.

    Ties break toward the lowest mode index, which keeps training
    deterministic; exact ties have measure zero under Gaussian starts.
    """
    if not modes:
        raise ValueError("modes must be nonempty")
    best_idx = 0
    best_d = frobenius_dist(x0, perm_matrix(modes[0]))
    for idx in range(1, len(modes)):
        d = frobenius_dist(x0, perm_matrix(modes[idx]))
        if d < best_d:
            best_idx, best_d = idx, d
    return modes[best_idx]


def sample_path_point(
    x0: np.ndarray,
    p_star: np.ndarray,
    t: float,
    sigma_t: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Perturbed interpolation point and its constant target velocity.

    The interpolant (1-t)*x0 + t*P is feasible, and the perturbation enters
    through the tangent projector, so the returned point is feasible too; no
    renormalization happens anywhere.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    p = perm_matrix(p_star)
    x_t = (1.0 - t) * x0 + t * p
    if sigma_t > 0:
        x_t = x_t + sigma_t * center(rng.standard_normal(x0.shape))
    return x_t, p - x0


def _mode_stacks(instances) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked per-instance mode one-hots (second mode duplicated if absent)."""
    n = instances[0].n
    first = np.empty((len(instances), n, n))
    second = np.empty((len(instances), n, n))
    has_two = np.zeros(len(instances), dtype=bool)
    for i, inst in enumerate(instances):
        first[i] = perm_matrix(inst.modes[0])
        if len(inst.modes) > 1:
            second[i] = perm_matrix(inst.modes[1])
            has_two[i] = True
        else:
            second[i] = first[i]
    return first, second, has_two


def train(
    net,
    instances: list,
    config: TrainConfig,
    val_instances: list | None = None,
    optim=None,
    start_epoch: int = 0,
    log_cb=None,
) -> tuple[list[dict], "OptimState"]:
    """Velocity regression over the dataset; returns (per-epoch log, optimizer).

    Per minibatch: encode contexts, draw noisy feasible starts, couple each to
    its nearest mode, perturb a uniformly-drawn path point, and step Adam on
    the squared Frobenius velocity error.  Passing optim/start_epoch resumes
    a run; validation metrics are computed every val_every epochs when a
    validation set is given.
    """
    from .evalkit import evaluate  # local import: evalkit is metrics-only
    from .net import OptimState, opt_step

    if not instances:
        raise ValueError("training set is empty")
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ValueError("all training instances must share n")

    ctx_all = np.stack([inst.context() for inst in instances])
    mode_a, mode_b, _ = _mode_stacks(instances)

    steps_per_epoch = (len(instances) + config.batch_size - 1) // config.batch_size
    if optim is None:
        optim = OptimState.for_params(
            net.param_count,
            total_steps=config.epochs * steps_per_epoch,
            base_lr=config.base_lr,
            floor_lr=config.floor_lr,
            weight_decay=config.weight_decay,
        )

    rng = np.random.default_rng([config.seed, 1, start_epoch])
    task = "slap" if hasattr(instances[0], "cost") else "sort"
    log_rows: list[dict] = []
    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(len(instances))
        total_loss = 0.0
        for b0 in range(0, len(instances), config.batch_size):
            sel = order[b0 : b0 + config.batch_size]
            bsz = len(sel)
            x0 = noisy_uniform_batch(
                bsz, n, config.sigma0, rng, unit_frobenius=config.unit_frobenius
            )
            pa, pb = mode_a[sel], mode_b[sel]
            d_a = ((x0 - pa) ** 2).sum(axis=(1, 2))
            d_b = ((x0 - pb) ** 2).sum(axis=(1, 2))
            p_star = np.where((d_b < d_a)[:, None, None], pb, pa)
            t = rng.random(bsz)
            x_t = (1.0 - t)[:, None, None] * x0 + t[:, None, None] * p_star
            sigma_t = config.sigma_path * (1.0 - t)
            if config.sigma_path > 0:
                x_t = x_t + sigma_t[:, None, None] * center(rng.standard_normal((bsz, n, n)))
            xdot = p_star - x0
            try:
                loss, grad = net.loss_and_grad(x_t, ctx_all[sel], t, xdot)
            except FloatingPointError as exc:
                raise NumericError(f"epoch {epoch + 1}, batch {b0 // config.batch_size + 1}: {exc}")
            opt_step(optim, net.params, grad)
            total_loss += loss * bsz
        row = {"epoch": epoch + 1, "cfm_loss": total_loss / len(instances)}
        is_val_epoch = (epoch + 1) % config.val_every == 0 or epoch + 1 == config.epochs
        if val_instances and is_val_epoch:
            report = evaluate(
                val_instances,
                lambda inst, k, r: sample(net, inst, config, r, k=k).perms,
                k=10,
                task=task,
                seed=config.seed + 7919,
            )
            row.update(report.log_columns())
        log_rows.append(row)
        if log_cb is not None:
            log_cb(row)
    return log_rows, optim


def sample(net, instance, config: TrainConfig, rng: np.random.Generator, k=None) -> SampleSet:
    """K Euler trajectories from fresh noisy starts, rounded to permutations.

    Feasibility of every intermediate state is asserted at
    config.feasibility_tol; a violation would mean the projector is broken,
    so it raises rather than repairs.
    """
    k = config.samples_k if k is None else int(k)
    h = net.encode_context(instance.context())
    x = noisy_uniform_batch(
        k, instance.n, config.sigma0, rng, unit_frobenius=config.unit_frobenius
    )
    steps = config.euler_steps
    worst = marginal_residual_batch(x)
    for s in range(steps):
        v = net.velocity(x, h, t=s / steps)
        x = x + v / steps
        res = marginal_residual_batch(x)
        worst = np.maximum(worst, res)
        if worst.max() > config.feasibility_tol:
            raise AssertionError(
                f"feasibility residual {worst.max():.3e} exceeded "
                f"{config.feasibility_tol:.1e} at step {s + 1} (projector bug)"
            )
    perms = [round_to_perm(x[i]) for i in range(k)]
    return SampleSet(getattr(instance, "uid", 0), perms, worst, endpoints=x)


def marginal_residual_batch(x: np.ndarray) -> np.ndarray:
    """Per-matrix max row/col-sum deviation from 1 for a (B, n, n) batch."""
    rows = np.abs(x.sum(axis=-1) - 1.0).max(axis=-1)
    cols = np.abs(x.sum(axis=-2) - 1.0).max(axis=-1)
    return np.maximum(rows, cols)


def oracle_velocity_sample(
    modes: list[np.ndarray],
    config: TrainConfig,
    rng: np.random.Generator,
    k=None,
) -> SampleSet:
    """Transport with the ideal velocity: straight to the nearest target.

    Bypasses the network entirely; each trajectory moves with the constant
    velocity target - start, so the endpoint equals the coupled mode up to
    Euler-step float accumulation.  Used to test population-limit claims
    without training error in the way.
    """
    if not modes:
        raise ValueError("modes must be nonempty")
    k = config.samples_k if k is None else int(k)
    n = len(modes[0])
    onehots = np.stack([perm_matrix(m) for m in modes])
    x = noisy_uniform_batch(k, n, config.sigma0, rng, unit_frobenius=config.unit_frobenius)
    d = ((x[:, None, :, :] - onehots[None]) ** 2).sum(axis=(2, 3))
    pick = d.argmin(axis=1)  # argmin takes the first minimum: lowest-index tie-break
    target = onehots[pick]
    v = target - x
    steps = config.euler_steps
    worst = marginal_residual_batch(x)
    for _ in range(steps):
        x = x + v / steps
        worst = np.maximum(worst, marginal_residual_batch(x))
    if worst.max() > config.feasibility_tol:
        raise AssertionError("oracle transport left the constraint set (projector bug)")
    perms = [round_to_perm(x[i]) for i in range(k)]
    return SampleSet(-1, perms, worst, endpoints=x)


def measure_trajectory_feasibility(net, instance, config: TrainConfig, rng) -> float:
    """Worst row/col-sum residual over all steps of a sampling run."""
    return float(sample(net, instance, config, rng).residuals.max())

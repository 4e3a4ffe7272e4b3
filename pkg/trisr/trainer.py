"""Simultaneous three-player training loop, checkpoint/resume, and inference."""

import queue
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.console import Console

from trisr import losses
from trisr.checkpoint import load_parameters, load_tensors, save_parameters, save_tensors
from trisr.config import LOSS_CSV_COLUMNS, settings
from trisr.exceptions import CheckpointError, EmptyDataset, IoError, NonFiniteLoss
from trisr.file_utils import CsvLog, atomic_write_text, ensure_dir, read_csv, write_csv
from trisr.networks import Network, build_critic, build_feature_extractor, build_generator
from trisr.optim import AdamState, adam_step
from trisr.schemas import Owner, StepReport, TrainerMeta, TrainingConfig, UpdateMode
from trisr.tensor import Graph, Tensor, backward
from trisr.volume_io import (PatchGrid, Volume, denormalize, downsample_half_array,
                             extract_patch_array, normalize, stitch_patch_array)

console = Console(stderr=True)

# Counter-keyed stream for the patch sampler; noise uses roles 0 and 1
ROLE_SAMPLER = 2

STATE_TENSORS = "state.tsrc"
STATE_META = "state.json"
GENERATOR_CHECKPOINT = "generator.tsrc"
LOSS_LOG = "losses.csv"

# phi, theta, psi: the order the updates are listed in
UPDATE_ORDER = (Owner.PHI, Owner.THETA, Owner.PSI)


@dataclass
class TrainerState:
    config: TrainingConfig
    generator: Network
    critic: Network
    feature_extractor: Network
    adam: Dict[Owner, AdamState]
    schedule: losses.NoiseSchedule
    iteration: int = 0
    history: Deque[StepReport] = field(default_factory=lambda: deque(maxlen=settings.LOSS_HISTORY_SIZE))

    @property
    def players(self) -> Dict[Owner, Network]:
        return {
            Owner.THETA: self.generator,
            Owner.PSI: self.critic,
            Owner.PHI: self.feature_extractor,
        }

    @property
    def seed(self) -> int:
        return self.config.seed

    def sigma(self) -> float:
        return self.schedule.sigma(self.iteration)


def init_state(cfg: TrainingConfig) -> TrainerState:
    """Kaiming-initialized players with fresh Adam moments at iteration 0."""
    dtype = np.dtype(cfg.dtype)
    generator = build_generator(cfg.generator_spec(), dtype=dtype, seed=cfg.seed)
    critic = build_critic(cfg.critic_spec(), dtype=dtype, seed=cfg.seed + 1)
    fe = build_feature_extractor(cfg.feature_extractor_spec(), dtype=dtype, seed=cfg.seed + 2)
    state = TrainerState(
        config=cfg,
        generator=generator,
        critic=critic,
        feature_extractor=fe,
        adam={},
        schedule=losses.NoiseSchedule(cfg.sigma0, cfg.total_iters),
    )
    state.adam = {owner: AdamState.for_params(net.params) for owner, net in state.players.items()}
    return state


# ---------------------------------------------------------------- one step

@dataclass
class _Forward:
    graph: Graph
    l_pixel: Tensor
    l_perc: Tensor
    l_g_ragan: Tensor
    l_d_ragan: Tensor
    l_g_total: Tensor

    def objective(self, owner: Owner) -> Tensor:
        return {
            Owner.PHI: self.l_perc,
            Owner.THETA: self.l_g_total,
            Owner.PSI: self.l_d_ragan,
        }[owner]

    def report(self, iteration: int, sigma: float) -> StepReport:
        return StepReport(
            iter=iteration,
            sigma=sigma,
            l_pixel=self.l_pixel.item(),
            l_perc=self.l_perc.item(),
            l_g_ragan=self.l_g_ragan.item(),
            l_d_ragan=self.l_d_ragan.item(),
            l_g_total=self.l_g_total.item(),
        )


def _forward(state: TrainerState, x_hr: np.ndarray) -> _Forward:
    cfg = state.config
    t = state.iteration
    x = Tensor._wrap(x_hr)
    x_lr = Tensor._wrap(downsample_half_array(x_hr))

    with Graph() as graph:
        y = state.generator(x_lr)
        l_pixel = losses.pixel_loss(x, y)
        l_perc = losses.perceptual_loss(state.feature_extractor, x, y)
        x_noisy = losses.add_instance_noise(x, state.schedule, t, cfg.seed, losses.ROLE_REAL)
        y_noisy = losses.add_instance_noise(y, state.schedule, t, cfg.seed, losses.ROLE_FAKE)
        c_real = state.critic(x_noisy)
        c_fake = state.critic(y_noisy)
        l_g = losses.ragan_g_loss(c_real, c_fake)
        l_d = losses.ragan_d_loss(c_real, c_fake)
        l_total = losses.generator_objective(l_perc, l_pixel, l_g, cfg.alpha, cfg.beta)
    return _Forward(graph, l_pixel, l_perc, l_g, l_d, l_total)


def _gradients_for(state: TrainerState, fwd: _Forward, owner: Owner) -> Dict[str, np.ndarray]:
    params = state.players[owner].params
    params.zero_grad()
    backward(fwd.objective(owner), fwd.graph, inputs=[t for _, t in params.items()])
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}
    params.zero_grad()
    return grads


def _as_batch(state: TrainerState, batch_hr: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch_hr, dtype=state.config.dtype)
    if batch.ndim == 4:
        batch = batch[:, None]
    return batch


def _check_finite(state: TrainerState, report: StepReport) -> None:
    if not report.is_finite():
        raise NonFiniteLoss(
            f"Non-finite loss at iteration {report.iter}",
            iteration=report.iter,
            losses=report.model_dump(),
        )


def compute_gradients(
    state: TrainerState, batch_hr: np.ndarray
) -> Tuple[StepReport, Dict[Owner, Dict[str, np.ndarray]]]:
    """Losses and the three players' gradients from a single forward pass.

    Args:
        state: Current trainer state; not modified
        batch_hr: HR patches, (N, 1, w, w, w) or (N, w, w, w), normalized to [0, 1]

    Returns:
        The step report and, per owner, the gradient of that player's objective
    """
    fwd = _forward(state, _as_batch(state, batch_hr))
    report = fwd.report(state.iteration, state.sigma())
    grads = {owner: _gradients_for(state, fwd, owner) for owner in UPDATE_ORDER}
    return report, grads


def train_step(state: TrainerState, batch_hr: np.ndarray) -> StepReport:
    """Update phi, theta and psi once and advance the iteration counter.

    Simultaneous mode takes all three gradients before touching any parameter.
    Sequential mode re-runs the forward pass after each player's update.
    """
    cfg = state.config
    batch = _as_batch(state, batch_hr)

    if cfg.update_mode == UpdateMode.SIMULTANEOUS:
        report, grads = compute_gradients(state, batch)
        _check_finite(state, report)
        for owner in UPDATE_ORDER:
            adam_step(state.players[owner].params, grads[owner], state.adam[owner], cfg)
    else:
        report = None
        for owner in UPDATE_ORDER:
            fwd = _forward(state, batch)
            if report is None:
                report = fwd.report(state.iteration, state.sigma())
                _check_finite(state, report)
            grads = _gradients_for(state, fwd, owner)
            adam_step(state.players[owner].params, grads, state.adam[owner], cfg)

    state.iteration += 1
    state.history.append(report)
    return report


# ---------------------------------------------------------------- data

def build_patch_pool(dataset: Sequence[Volume], cfg: TrainingConfig) -> np.ndarray:
    """Normalize every volume and cut HR patches; returns (P, 1, w, w, w)."""
    if not dataset:
        raise EmptyDataset("Training needs at least one volume")
    stacks = []
    for v in dataset:
        norm = normalize(v)
        grid = PatchGrid.build(norm.dims, cfg.window, cfg.stride, norm.spacing)
        stacks.append(extract_patch_array(norm.data, grid))
    pool = np.concatenate(stacks).astype(cfg.dtype, copy=False)
    return pool[:, None]


def sample_batch_indices(pool_size: int, batch_size: int, iteration: int, seed: int) -> List[int]:
    """Patch indices for one iteration.

    Iteration t reads positions t*B .. t*B+B-1 of the concatenated per-epoch
    permutations, so the result depends only on (seed, iteration).
    """
    if pool_size < 1:
        raise EmptyDataset("Patch pool is empty")
    perms: Dict[int, np.ndarray] = {}
    indices = []
    for pos in range(iteration * batch_size, (iteration + 1) * batch_size):
        epoch, offset = divmod(pos, pool_size)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch, ROLE_SAMPLER]).permutation(pool_size)
        indices.append(int(perms[epoch][offset]))
    return indices


def iter_batches(
    pool: np.ndarray, cfg: TrainingConfig, start: int, stop: int, prefetch: Optional[int] = None
) -> Iterator[np.ndarray]:
    """Yield batches for iterations start..stop-1, optionally from a bounded producer thread."""
    depth = settings.PREFETCH_DEPTH if prefetch is None else prefetch

    def make(t: int) -> np.ndarray:
        return pool[sample_batch_indices(len(pool), cfg.batch_size, t, cfg.seed)]

    if depth <= 0:
        for t in range(start, stop):
            yield make(t)
        return

    q: "queue.Queue" = queue.Queue(maxsize=depth)
    stop_event = threading.Event()

    def put(item: object) -> bool:
        while not stop_event.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for t in range(start, stop):
                if not put(make(t)):
                    return
        except BaseException as e:
            # handed to the consumer, which re-raises it in the training thread
            put(_ProducerFailed(e))

    worker = threading.Thread(target=produce, name="patch-producer", daemon=True)
    worker.start()
    try:
        for _ in range(start, stop):
            item = q.get()
            if isinstance(item, _ProducerFailed):
                raise item.error
            yield item
    finally:
        stop_event.set()
        worker.join()


@dataclass(frozen=True)
class _ProducerFailed:
    error: BaseException


# ---------------------------------------------------------------- checkpoints

def save_state(state: TrainerState, directory: Union[str, Path]) -> Path:
    """Write parameters and Adam moments (TSRC) plus a JSON sidecar."""
    directory = ensure_dir(directory)
    tensors: Dict[str, np.ndarray] = {}
    for owner, net in state.players.items():
        for name, arr in net.params.state_dict().items():
            tensors[f"{owner.value}/{name}"] = arr
        for key, arr in state.adam[owner].state_dict().items():
            tensors[f"adam/{owner.value}/{key}"] = arr
    save_tensors(directory / STATE_TENSORS, tensors)

    meta = TrainerMeta(
        iteration=state.iteration,
        adam_steps={owner: adam.t for owner, adam in state.adam.items()},
        config=state.config,
        history=list(state.history),
    )
    atomic_write_text(directory / STATE_META, meta.model_dump_json(indent=2))
    return directory


def load_state(directory: Union[str, Path]) -> TrainerState:
    directory = Path(directory)
    meta_path = directory / STATE_META
    if not meta_path.is_file():
        raise CheckpointError(f"No trainer checkpoint in {directory}")
    try:
        meta = TrainerMeta.model_validate_json(meta_path.read_text())
    except OSError as e:
        raise IoError(f"Cannot read {meta_path}: {e}") from e

    state = init_state(meta.config)
    tensors = load_tensors(directory / STATE_TENSORS)
    for owner, net in state.players.items():
        prefix = f"{owner.value}/"
        net.params.load_state_dict(
            {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        )
        adam_prefix = f"adam/{owner.value}/"
        try:
            state.adam[owner].load_state_dict(
                {k[len(adam_prefix):]: v for k, v in tensors.items() if k.startswith(adam_prefix)},
                meta.adam_steps[owner],
            )
        except KeyError as e:
            raise CheckpointError(f"{directory}: missing Adam state {e}") from e
    state.iteration = meta.iteration
    state.history.extend(meta.history)
    return state


def _open_loss_log(path: Path, iteration: int) -> CsvLog:
    """Fresh log at iteration 0; on resume keep only rows before ``iteration``."""
    if iteration == 0 or not path.exists():
        return CsvLog(path, LOSS_CSV_COLUMNS)
    rows = read_csv(path)[1:]
    kept = [row for row in rows if row and int(row[0]) < iteration]
    write_csv(path, LOSS_CSV_COLUMNS, kept)
    return CsvLog(path, LOSS_CSV_COLUMNS, append=True)


def _dump_nonfinite(state: TrainerState, out_dir: Optional[Path], error: NonFiniteLoss) -> NonFiniteLoss:
    if out_dir is not None:
        dump = save_state(state, out_dir / f"nonfinite-{error.iteration}")
        error.dump_path = str(dump)
        console.print(f"[red]Non-finite loss at iteration {error.iteration}; state dumped to {dump}[/red]")
    return error


def train(
    dataset: Sequence[Volume],
    cfg: TrainingConfig,
    out_dir: Optional[Union[str, Path]] = None,
    state: Optional[TrainerState] = None,
    until: Optional[int] = None,
) -> TrainerState:
    """Run iterations state.iteration .. cfg.total_iters - 1 over patches of ``dataset``.

    ``until`` stops early at that iteration (the noise schedule still spans total_iters).

    With ``out_dir`` a loss CSV, periodic trainer checkpoints and the final
    generator checkpoint are written there.
    """
    pool = build_patch_pool(dataset, cfg)
    state = state if state is not None else init_state(cfg)
    out_path = ensure_dir(out_dir) if out_dir is not None else None

    console.print(
        f"[blue]Training on {len(pool)} patches ({len(dataset)} volume(s)), "
        f"iterations {state.iteration}..{cfg.total_iters}[/blue]"
    )

    stop = cfg.total_iters if until is None else min(until, cfg.total_iters)
    log = _open_loss_log(out_path / LOSS_LOG, state.iteration) if out_path else None
    batches = iter_batches(pool, cfg, state.iteration, stop)
    try:
        for batch in batches:
            try:
                report = train_step(state, batch)
            except NonFiniteLoss as e:
                raise _dump_nonfinite(state, out_path, e)
            if log:
                log.write(report.as_row())

            t = state.iteration
            if t % settings.LOG_EVERY == 0 or t == cfg.total_iters:
                console.print(
                    f"[blue]iter {t}/{cfg.total_iters}[/blue] sigma={report.sigma:.3f} "
                    f"pix={report.l_pixel:.4f} perc={report.l_perc:.4f} "
                    f"G={report.l_g_ragan:.4f} D={report.l_d_ragan:.4f}"
                )
            if out_path and cfg.checkpoint_every and t % cfg.checkpoint_every == 0 and t < cfg.total_iters:
                save_state(state, out_path / "checkpoint")
    finally:
        batches.close()
        if log:
            log.close()

    if out_path:
        save_state(state, out_path / "checkpoint")
        save_parameters(out_path / GENERATOR_CHECKPOINT, state.generator.params)
        console.print(f"[green]Training finished at iteration {state.iteration}[/green]")
    return state


def resume(
    dataset: Sequence[Volume], out_dir: Union[str, Path], cfg: Optional[TrainingConfig] = None
) -> TrainerState:
    """Continue a run from ``out_dir``/checkpoint; ``cfg`` may only extend total_iters."""
    state = load_state(Path(out_dir) / "checkpoint")
    if cfg is not None:
        if cfg.model_copy(update={"total_iters": state.config.total_iters}) != state.config:
            raise CheckpointError("Resume config differs from the checkpoint beyond total_iters")
        state.config = cfg
        state.schedule = losses.NoiseSchedule(cfg.sigma0, cfg.total_iters)
    console.print(f"[blue]Resuming from iteration {state.iteration}[/blue]")
    return train(dataset, state.config, out_dir, state)


# ---------------------------------------------------------------- inference

def load_generator(path: Union[str, Path], cfg: TrainingConfig) -> Network:
    generator = build_generator(cfg.generator_spec(), dtype=np.dtype(cfg.dtype))
    load_parameters(path, generator.params)
    return generator


def infer(
    volume_lr: Volume,
    generator: Union[Network, str, Path],
    cfg: TrainingConfig,
) -> Volume:
    """x2 super-resolution of a whole volume, patch by patch on the LR grid."""
    if not isinstance(generator, Network):
        generator = load_generator(generator, cfg)

    norm = normalize(volume_lr)
    window, stride = cfg.window // 2, cfg.stride // 2
    grid = PatchGrid.build(norm.dims, window, stride, norm.spacing)
    patches = extract_patch_array(norm.data, grid).astype(cfg.dtype, copy=False)

    outputs: List[np.ndarray] = []
    for start in range(0, len(patches), cfg.batch_size):
        batch = Tensor._wrap(patches[start:start + cfg.batch_size, None])
        outputs.extend(generator(batch).data[:, 0])

    stitched = stitch_patch_array(grid, outputs, scale=2).astype(np.float32)
    sx, sy, sz = norm.spacing
    sr = Volume(stitched, (sx / 2, sy / 2, sz / 2), norm.source_range)
    return denormalize(sr)

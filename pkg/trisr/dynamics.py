"""Dirac-GAN dynamics: one real point at 0, a generated point at theta, and the
linear critic C(x) = psi * x. Equations are in docs/dynamics.md."""

from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from rich.console import Console

from trisr import losses
from trisr import tensor as T
from trisr.config import TRAJECTORY_CSV_COLUMNS
from trisr.exceptions import IoError
from trisr.file_utils import ensure_dir, read_csv, write_csv
from trisr.schemas import DiracGanState, LossKind, NoiseKind
from trisr.tensor import Graph, Tensor

console = Console(stderr=True)

MC_SAMPLES = 64
PORTRAIT_SIZE = 256


def _noise(sigma: float, step: int, seed: int, role: int, samples: int) -> np.ndarray:
    """Antithetic Gaussian draws (half the samples and their negations)."""
    if sigma == 0.0:
        return np.zeros(1, dtype=np.float64)
    half = losses.noise_rng(seed, step, role).normal(0.0, sigma, size=samples // 2)
    return np.concatenate([half, -half])


def _standard_d_loss(c_real: Tensor, c_fake: Tensor) -> Tensor:
    # -E[log sigmoid(C(x))] - E[log(1 - sigmoid(C(y)))]
    real = T.mean(T.log(T.sigmoid(c_real), eps=losses.LOG_EPS))
    fake = T.mean(T.log(T.sub(1.0, T.sigmoid(c_fake)), eps=losses.LOG_EPS))
    return T.mul(T.add(real, fake), -1.0)


def gradients(
    loss_kind: LossKind,
    theta: float,
    psi: float,
    eps_real: np.ndarray,
    eps_fake: np.ndarray,
) -> Tuple[float, float]:
    """(dL_G/dtheta, dL_D/dpsi) for one set of noise samples."""
    th = Tensor(np.array([theta], dtype=np.float64), requires_grad=True)
    ps = Tensor(np.array([psi], dtype=np.float64), requires_grad=True)
    with Graph() as graph:
        c_real = T.mul(ps, Tensor._wrap(eps_real))
        c_fake = T.mul(ps, T.add(th, Tensor._wrap(eps_fake)))
        if loss_kind == LossKind.STANDARD:
            l_d = _standard_d_loss(c_real, c_fake)
            # minimax: the generator maximizes the critic's loss
            l_g = T.mul(l_d, -1.0)
        else:
            l_d = losses.ragan_d_loss(c_real, c_fake)
            l_g = losses.ragan_g_loss(c_real, c_fake)
    T.backward(l_d, graph, inputs=[ps])
    T.backward(l_g, graph, inputs=[th])
    return float(th.grad[0]), float(ps.grad[0])


def simulate(
    loss_kind: Union[LossKind, str],
    noise: Union[NoiseKind, str],
    lr: float,
    steps: int,
    init: Tuple[float, float] = (1.0, 1.0),
    seed: int = 0,
    sigma0: float = 1.0,
    total_iters: Optional[int] = None,
    samples: int = MC_SAMPLES,
) -> DiracGanState:
    """Simultaneous gradient descent of both players from ``init``.

    With annealed noise, sigma(t) = max(0, sigma0 * (1 - t / total_iters)) and
    total_iters defaults to ``steps``.
    """
    loss_kind = LossKind(loss_kind)
    noise = NoiseKind(noise)
    if not lr > 0:
        raise ValueError("lr must be > 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if samples < 2 or samples % 2:
        raise ValueError("samples must be a positive even number")

    schedule = losses.NoiseSchedule(
        sigma0 if noise == NoiseKind.ANNEALED else 0.0,
        steps if total_iters is None else total_iters,
    )
    theta, psi = float(init[0]), float(init[1])
    trajectory: List[Tuple[float, float]] = [(theta, psi)]

    for t in range(steps):
        sigma = schedule.sigma(t)
        eps_real = _noise(sigma, t, seed, losses.ROLE_REAL, samples)
        eps_fake = _noise(sigma, t, seed, losses.ROLE_FAKE, samples)
        g_theta, g_psi = gradients(loss_kind, theta, psi, eps_real, eps_fake)
        theta, psi = theta - lr * g_theta, psi - lr * g_psi
        trajectory.append((theta, psi))

    return DiracGanState(theta=theta, psi=psi, trajectory=trajectory)


def render_phase_portrait(state: DiracGanState, size: int = PORTRAIT_SIZE) -> Image.Image:
    """Grayscale raster of the (theta, psi) path; axes in light gray, path in black."""
    points = np.asarray(state.trajectory, dtype=np.float64)
    extent = float(np.max(np.abs(points))) * 1.05 if points.size else 1.0
    extent = extent or 1.0
    half = (size - 1) / 2.0

    def to_pixel(theta: float, psi: float) -> Tuple[float, float]:
        return (half + theta / extent * half, half - psi / extent * half)

    img = Image.new("L", (size, size), 255)
    draw = ImageDraw.Draw(img)
    draw.line([(0, half), (size - 1, half)], fill=192)
    draw.line([(half, 0), (half, size - 1)], fill=192)
    pixels = [to_pixel(th, ps) for th, ps in points]
    if len(pixels) > 1:
        draw.line(pixels, fill=0)
    else:
        draw.point(pixels, fill=0)
    return img


def export_trajectory(state: DiracGanState, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``path`` as CSV (step, theta, psi) and a PGM phase portrait next to it."""
    path = Path(path)
    ensure_dir(path.parent)
    write_csv(
        path,
        TRAJECTORY_CSV_COLUMNS,
        ([step, repr(th), repr(ps)] for step, (th, ps) in enumerate(state.trajectory)),
    )
    pgm_path = path.with_suffix(".pgm")
    try:
        render_phase_portrait(state).save(pgm_path, format="PPM")
    except OSError as e:
        raise IoError(f"Cannot write {pgm_path}: {e}") from e
    console.print(f"[green]Wrote {len(state.trajectory)} trajectory rows to {path}[/green]")
    return path, pgm_path


def read_trajectory(path: Union[str, Path]) -> List[Tuple[float, float]]:
    rows = read_csv(path)
    return [(float(th), float(ps)) for _, th, ps in rows[1:]]

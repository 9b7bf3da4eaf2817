"""Evaluation metrics and trend analyses.

Reconstructions are clamped to [0,1] before any metric is computed (never
inside the autoregressive loop itself). Analyses exploit prefix
consistency: one trace to the largest requested token count yields the
rows for every smaller count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import stats

from .core import ContractViolation, mse
from .loop import run

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class EvalRow:
    image_id: str
    n_tokens: int
    mse: float
    ssim: float


@dataclass
class EntropyRow:
    image_id: str
    entropy_bits: float
    tokens_to_threshold: int  # n_cap + 1 is the not-reached sentinel
    tau: float


def _gaussian_window(size: int, sigma: float, dtype: torch.dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean local SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1.

    Inputs are clamped to [0,1]; the local map uses valid windows only and
    is averaged over positions, channels and batch.
    """
    if x.shape != y.shape:
        raise ContractViolation(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ContractViolation(f"images must be at least {SSIM_WINDOW}px on each side")
    x = x.detach().to(torch.float64).clamp(0, 1)
    y = y.detach().to(torch.float64).clamp(0, 1)
    b, c = x.shape[0], x.shape[1]
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, torch.float64)
    kernel = win.expand(c, 1, -1, -1)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.conv2d(t, kernel, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sigma_x = filt(x * x) - mu_x ** 2
    sigma_y = filt(y * y) - mu_y ** 2
    sigma_xy = filt(x * y) - mu_x * mu_y
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_x + sigma_y + c2)
    return float((num / den).mean())


def shannon_entropy(image: torch.Tensor) -> float:
    """Base-2 entropy of the 256-level gray histogram of a single image.

    Accepts (C,H,W) or (1,C,H,W); RGB collapses to luma before
    quantization so the value is channel-count independent.
    """
    if image.dim() == 4:
        if image.shape[0] != 1:
            raise ContractViolation("shannon_entropy takes a single image")
        image = image[0]
    img = image.detach().to(torch.float64).clamp(0, 1)
    if img.shape[0] == 3:
        gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    else:
        gray = img.mean(dim=0)
    q = torch.round(gray * 255).to(torch.int64).clamp(0, 255)
    counts = torch.bincount(q.reshape(-1), minlength=256).to(torch.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * torch.log2(p)).sum())


def _clamped_mse(x: torch.Tensor, recon: torch.Tensor) -> float:
    return float(mse(x, recon.clamp(0, 1)))


def _batched_traces(model, images: torch.Tensor, n_max: int, chunk: int = 64):
    """Yield (start index, list of cumulative reconstructions per step)."""
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            batch = images[start:start + chunk]
            trace = run(model, batch, n_max)
            yield start, trace


def eval_table(model, images: torch.Tensor, image_ids: list[str],
               n_list: list[int]) -> list[EvalRow]:
    """Per-image MSE and SSIM of the clamped reconstruction at each n."""
    if not n_list or min(n_list) < 1:
        raise ContractViolation("n_list must contain positive token counts")
    n_max = max(n_list)
    rows: list[EvalRow] = []
    for start, trace in _batched_traces(model, images, n_max):
        batch = images[start:start + trace.cumulative[0].shape[0]]
        for i in range(batch.shape[0]):
            x = batch[i:i + 1]
            for n in sorted(set(n_list)):
                recon = trace.cumulative[n - 1][i:i + 1]
                rows.append(EvalRow(image_id=image_ids[start + i], n_tokens=n,
                                    mse=_clamped_mse(x, recon),
                                    ssim=ssim(x, recon)))
    rows.sort(key=lambda r: (r.image_id, r.n_tokens))
    return rows


def mse_vs_tokens(models: dict[str, object], images: torch.Tensor,
                  image_ids: list[str], n_eval_max: int) -> list[tuple[str, int, str, float]]:
    """Per-model, per-n distribution of per-image MSE (plot-ready rows).

    n_eval_max may exceed any training cap; the loop simply keeps encoding
    residuals.
    """
    rows = []
    for model_name, model in models.items():
        for start, trace in _batched_traces(model, images, n_eval_max):
            batch = images[start:start + trace.cumulative[0].shape[0]]
            for i in range(batch.shape[0]):
                x = batch[i:i + 1]
                for n in range(1, n_eval_max + 1):
                    rows.append((model_name, n, image_ids[start + i],
                                 _clamped_mse(x, trace.cumulative[n - 1][i:i + 1])))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def tokens_to_threshold(model, image: torch.Tensor, tau: float, n_cap: int) -> int:
    """Smallest n with clamped MSE <= tau; n_cap + 1 when never reached."""
    with torch.no_grad():
        trace = run(model, image, n_cap)
        for n in range(1, n_cap + 1):
            if _clamped_mse(image, trace.cumulative[n - 1]) <= tau:
                return n
    return n_cap + 1


def entropy_vs_tokens(model, images: torch.Tensor, image_ids: list[str],
                      tau: float, n_cap: int) -> tuple[list[EntropyRow], float | None]:
    """Per-image (entropy, tokens-to-threshold) plus Spearman correlation.

    Sentinel rows (threshold never reached within n_cap) are excluded from
    the correlation; with fewer than two usable rows or zero variance the
    correlation is undefined and reported as None.
    """
    rows = []
    for i in range(images.shape[0]):
        x = images[i:i + 1]
        rows.append(EntropyRow(
            image_id=image_ids[i],
            entropy_bits=shannon_entropy(x),
            tokens_to_threshold=tokens_to_threshold(model, x, tau, n_cap),
            tau=tau,
        ))
    usable = [r for r in rows if r.tokens_to_threshold <= n_cap]
    corr: float | None = None
    if len(usable) >= 2:
        e = np.array([r.entropy_bits for r in usable])
        t = np.array([r.tokens_to_threshold for r in usable], dtype=float)
        if np.ptp(e) > 0 and np.ptp(t) > 0:
            corr = float(stats.spearmanr(e, t).statistic)
            if math.isnan(corr):
                corr = None
    return rows, corr


# -- CSV emission (6 significant digits, mandatory headers) -------------------

def _fmt(v: float) -> str:
    return f"{v:.6g}"


def write_eval_csv(rows: list[EvalRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("image_id,n,mse,ssim\n")
        for r in rows:
            fh.write(f"{r.image_id},{r.n_tokens},{_fmt(r.mse)},{_fmt(r.ssim)}\n")


def write_mse_vs_tokens_csv(rows: list[tuple[str, int, str, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("model,n,image_id,mse\n")
        for model_name, n, image_id, value in rows:
            fh.write(f"{model_name},{n},{image_id},{_fmt(value)}\n")


def write_entropy_csv(rows: list[EntropyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("image_id,entropy_bits,tokens_to_threshold\n")
        for r in rows:
            fh.write(f"{r.image_id},{_fmt(r.entropy_bits)},{r.tokens_to_threshold}\n")

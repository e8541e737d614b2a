"""Attack-success and image-quality metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg
from scipy.stats import wasserstein_distance

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricReport:
    asr: float
    asr_mode: str
    asr_initially_correct: Optional[float] = None
    robust_accuracy: Optional[float] = None
    purifier: Optional[str] = None
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    psnr_peak: float = 2.0
    ssim_window: int = 7
    fid_proxy: Optional[float] = None
    fid_ridge: float = 0.0
    channel_emd: Optional[list] = None

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def summary(self) -> str:
        lines = [
            f"asr ({self.asr_mode}): {self.asr:.2f}",
            f"psnr mean: {self.psnr_mean:.3f} dB (peak {self.psnr_peak}, cap {PSNR_CAP})",
            f"ssim mean: {self.ssim_mean:.4f} (window {self.ssim_window}, K1 {SSIM_K1}, K2 {SSIM_K2})",
        ]
        if self.asr_initially_correct is not None:
            lines.insert(1, f"asr (initially-correct): {self.asr_initially_correct:.2f}")
        if self.robust_accuracy is not None:
            lines.append(f"robust accuracy [{self.purifier}]: {self.robust_accuracy:.2f}")
        if self.fid_proxy is not None:
            lines.append(f"fid proxy (classifier features, ridge {self.fid_ridge:g}): {self.fid_proxy:.4f}")
        if self.channel_emd is not None:
            r, g, b = self.channel_emd
            lines.append(f"channel EMD clean->adv: R {r:.5f} G {g:.5f} B {b:.5f}")
        return "\n".join(lines)


@torch.no_grad()
def predict(classifier, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([classifier(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])


def attack_success_rate(
    classifier,
    adversarials: torch.Tensor,
    labels: torch.Tensor,
    mode: str = "all",
    clean: Optional[torch.Tensor] = None,
) -> float:
    """Top-1 misclassification rate in percent.

    ``mode="initially-correct"`` restricts the count to images whose clean
    version (``clean``) the classifier gets right.
    """
    if len(adversarials) != len(labels):
        raise ValueError("adversarials and labels differ in length")
    wrong = predict(classifier, adversarials) != labels
    if mode == "all":
        keep = torch.ones_like(wrong)
    elif mode == "initially-correct":
        if clean is None or len(clean) != len(labels):
            raise ValueError("initially-correct mode needs aligned clean images")
        keep = predict(classifier, clean) == labels
    else:
        raise ValueError(f"unknown ASR mode {mode!r}")
    if keep.sum() == 0:
        return 0.0
    return 100.0 * float((wrong & keep).sum()) / float(keep.sum())


def robust_accuracy(classifier, purifier: Callable, adversarials: torch.Tensor, labels: torch.Tensor) -> float:
    if len(adversarials) != len(labels):
        raise ValueError("adversarials and labels differ in length")
    purified = purifier(adversarials)
    return 100.0 * float((predict(classifier, purified) == labels).sum()) / len(labels)


def identity_purifier(x: torch.Tensor) -> torch.Tensor:
    return x


class GaussianBlurPurifier:
    def __init__(self, sigma: float = 1.0, radius: Optional[int] = None):
        self.sigma = float(sigma)
        radius = radius if radius is not None else max(1, int(round(3 * sigma)))
        ax = torch.arange(-radius, radius + 1, dtype=torch.float64)
        k = torch.exp(-0.5 * (ax / sigma) ** 2)
        self.kernel = k / k.sum()

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        c = x.shape[1]
        k = self.kernel.to(x.dtype)
        r = (len(k) - 1) // 2
        h = F.conv2d(F.pad(x, (r, r, 0, 0), mode="reflect"), k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
        return F.conv2d(F.pad(h, (0, 0, r, r), mode="reflect"), k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)

    def __repr__(self):
        return f"blur:{self.sigma:g}"


def make_purifier(spec: str) -> Callable:
    """``identity`` or ``blur:<sigma>``."""
    if spec == "identity":
        return identity_purifier
    if spec.startswith("blur"):
        _, _, sigma = spec.partition(":")
        return GaussianBlurPurifier(float(sigma) if sigma else 1.0)
    raise ValueError(f"unknown purifier {spec!r}")


def _batched(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        return a[None], b[None], True
    return a, b, False


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 2.0, cap: float = PSNR_CAP) -> torch.Tensor:
    """Per-image PSNR in dB; identical images report ``cap``."""
    a, b, single = _batched(a, b)
    mse = ((a.double() - b.double()) ** 2).reshape(a.shape[0], -1).mean(dim=1)
    out = torch.where(mse > 0, 10.0 * torch.log10(peak ** 2 / mse.clamp_min(1e-300)), torch.full_like(mse, cap))
    out = out.clamp(max=cap)
    return out[0] if single else out


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 7, data_range: float = 2.0) -> torch.Tensor:
    """Per-image SSIM: uniform window, sample covariances, channel mean."""
    a, b, single = _batched(a, b)
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image smaller than the {window}px window")
    a, b = a.double(), b.double()
    n = window * window
    pool = lambda v: F.avg_pool2d(v, window, stride=1)  # noqa: E731
    mu_a, mu_b = pool(a), pool(b)
    cov = n / (n - 1)
    var_a = cov * (pool(a * a) - mu_a ** 2)
    var_b = cov * (pool(b * b) - mu_b ** 2)
    cov_ab = cov * (pool(a * b) - mu_a * mu_b)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov_ab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    out = s.mean(dim=(1, 2, 3))
    return out[0] if single else out


def channel_histograms(
    clean: torch.Tensor, adversarial: torch.Tensor, bins: int = 32, value_range=(-1.0, 1.0)
) -> dict:
    """Per-channel pixel counts over all images of a (B, 3, H, W) pair."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if clean.shape != adversarial.shape:
        raise ValueError("shape mismatch")
    if clean.ndim == 3:
        clean, adversarial = clean[None], adversarial[None]
    edges = np.linspace(value_range[0], value_range[1], bins + 1)
    out = {"edges": edges}
    for name, x in (("clean", clean), ("adversarial", adversarial)):
        arr = x.detach().cpu().double().clamp(*value_range).numpy()
        out[name] = np.stack([np.histogram(arr[:, c], bins=edges)[0] for c in range(arr.shape[1])])
    return out


def channel_emd(clean: torch.Tensor, adversarial: torch.Tensor) -> np.ndarray:
    """Per-channel earth-mover distance between pixel distributions, batch mean."""
    if clean.shape != adversarial.shape:
        raise ValueError("shape mismatch")
    if clean.ndim == 3:
        clean, adversarial = clean[None], adversarial[None]
    a = clean.detach().cpu().double().numpy()
    b = adversarial.detach().cpu().double().numpy()
    d = [[wasserstein_distance(a[i, c].ravel(), b[i, c].ravel()) for c in range(a.shape[1])] for i in range(len(a))]
    return np.asarray(d).mean(axis=0)


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = 1e-6) -> tuple[float, float]:
    """Frechet distance between two Gaussians.

    Returns ``(distance, ridge)``; ``ridge`` is the diagonal offset that had to
    be added to make the covariance product square-rootable (0 if none).
    """
    mu1, mu2 = np.atleast_1d(mu1).astype(np.float64), np.atleast_1d(mu2).astype(np.float64)
    cov1, cov2 = np.atleast_2d(cov1).astype(np.float64), np.atleast_2d(cov2).astype(np.float64)
    diff = mu1 - mu2
    ridge = 0.0
    if not diff.any() and np.array_equal(cov1, cov2):
        # sqrtm round-off would otherwise leave a tiny positive residue
        return 0.0, ridge
    covmean = linalg.sqrtm(cov1 @ cov2)
    if not np.isfinite(covmean).all():
        ridge = eps
        off = np.eye(len(cov1)) * eps
        covmean = linalg.sqrtm((cov1 + off) @ (cov2 + off))
        log.warning("singular covariance in frechet_distance; added %g to the diagonal", eps)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    d = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean)
    return float(max(d, 0.0)), ridge


def fid_proxy(
    set_a: torch.Tensor,
    set_b: torch.Tensor,
    feature_extractor: Optional[Callable] = None,
    return_ridge: bool = False,
):
    """Frechet distance between Gaussian fits of extracted features.

    Not the canonical Inception FID: any fixed extractor works (the toy
    classifier's penultimate layer in the CLI). Without an extractor the
    inputs are taken to be feature matrices already.
    """
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("both sets must be nonempty")
    with torch.no_grad():
        fa = feature_extractor(set_a) if feature_extractor else set_a
        fb = feature_extractor(set_b) if feature_extractor else set_b
    fa = torch.as_tensor(fa).reshape(len(fa), -1).double().cpu().numpy()
    fb = torch.as_tensor(fb).reshape(len(fb), -1).double().cpu().numpy()
    cov = lambda f: np.atleast_2d(np.cov(f, rowvar=False)) if len(f) > 1 else np.zeros((f.shape[1],) * 2)  # noqa: E731
    d, ridge = frechet_distance(fa.mean(0), cov(fa), fb.mean(0), cov(fb))
    return (d, ridge) if return_ridge else d

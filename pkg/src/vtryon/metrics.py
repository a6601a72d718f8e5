"""SSIM, FID, KID and IS, a pluggable embedding backend, and the per-category report."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
REPORT_ROWS = ("upper_body", "lower_body", "dresses", "all")


def _as_batch(x) -> torch.Tensor:
    """Accept H x W x C / C x H x W / B x C x H x W arrays or tensors; return float64 BCHW."""
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x.detach()).double()
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t.permute(2, 0, 1)[None] if t.shape[-1] in (1, 3) and t.shape[0] not in (1, 3) else t[None]
    return t


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(x, y, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid windows, channels and batch."""
    a, b = _as_batch(x), _as_batch(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    c = a.shape[1]
    win = _gaussian_window().expand(c, 1, SSIM_WINDOW, SSIM_WINDOW)
    filt = lambda z: F.conv2d(z, win, groups=c)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _check_features(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 samples per side")
    return a, b


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    # Tr((S_a S_b)^1/2) = Tr((S_a^1/2 S_b S_a^1/2)^1/2), the inner matrix is symmetric PSD
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0, None)).sum()
    diff = mu_a - mu_b
    return float(max(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt, 0.0))


def fid(feats_a, feats_b) -> float:
    a, b = _check_features(feats_a, feats_b)
    return frechet_distance(a.mean(0), np.cov(a, rowvar=False), b.mean(0), np.cov(b, rowvar=False))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(term_x + term_y - 2 * kxy.mean())


def kid(feats_a, feats_b, n_subsets: int = 10, subset_size: int = 1000, seed: int = 0) -> float:
    """Unbiased squared MMD (cubic polynomial kernel) averaged over random subsets."""
    a, b = _check_features(feats_a, feats_b)
    m = min(subset_size, len(a), len(b))
    rng = np.random.default_rng(seed)
    vals = [mmd2_unbiased(a[rng.choice(len(a), m, replace=False)], b[rng.choice(len(b), m, replace=False)])
            for _ in range(n_subsets)]
    return float(np.mean(vals))


def inception_score(probs, splits: int = 10, min_split: int = 500) -> float:
    """exp(mean KL(p(y|x) || p(y))), averaged over up to ``splits`` splits of at
    least ``min_split`` rows each (small sets are scored as one split)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or np.any(np.abs(p.sum(1) - 1) > 1e-4):
        raise ValueError("rows of probs must sum to 1")
    splits = max(1, min(splits, len(p) // max(min_split, 1)))
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(1)
        scores.append(np.exp(kl.mean()))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# embedding backends


class EmbeddingBackend:
    name = "abstract"

    def embed(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def classify(self, images: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    @property
    def fingerprint(self) -> str:
        raise NotImplementedError


class SeededConvBackend(EmbeddingBackend):
    """Small frozen random conv net; hermetic stand-in for an Inception backend.

    Features are centred and rescaled with statistics of seeded low-frequency
    colour images drawn at construction, so embeddings and logits vary on an O(1)
    scale instead of collapsing toward a constant.
    """

    def __init__(self, seed: int = 0, dim: int = 64, n_classes: int = 10, n_calibration: int = 256):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.features = nn.Sequential(
                nn.Conv2d(3, 16, 3, 2, 1), nn.ReLU(),
                nn.Conv2d(16, 32, 3, 2, 1), nn.ReLU(),
                nn.Conv2d(32, dim, 3, 2, 1), nn.ReLU(),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            ).double().eval()
            self.classifier = nn.Linear(dim, n_classes, bias=False).double().eval()
            nn.init.normal_(self.classifier.weight, std=dim ** -0.5)
            blocks = torch.rand(n_calibration, 3, 4, 3, dtype=torch.float64)
            calib = F.interpolate(blocks, size=(64, 48), mode="bilinear", align_corners=True)
        with torch.no_grad():
            raw = self.features(calib)
        self.mean = raw.mean(0)
        self.std = raw.var(0).mean().sqrt().clamp_min(1e-12)  # one scale; dead units stay dead
        with torch.no_grad():
            logits = self.classifier((raw - self.mean) / self.std)
            self.classifier.weight /= logits.std(0).mean().clamp_min(1e-12)
        self.name = f"seeded-conv-s{seed}-d{dim}-k{n_classes}"

    @torch.no_grad()
    def _standardised(self, images) -> torch.Tensor:
        return (self.features(_as_batch(images)) - self.mean) / self.std

    def embed(self, images):
        return self._standardised(images).numpy()

    @torch.no_grad()
    def classify(self, images):
        return torch.softmax(self.classifier(self._standardised(images)), dim=1).numpy()

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for module in (self.features, self.classifier):
            for k, v in module.state_dict().items():
                h.update(k.encode())
                h.update(v.numpy().tobytes())
        h.update(self.mean.numpy().tobytes())
        h.update(self.std.reshape(1).numpy().tobytes())
        return h.hexdigest()[:16]


class InceptionBackend(EmbeddingBackend):
    """torchvision Inception-v3 from a local weights file: pool features + class probabilities."""

    def __init__(self, weights_path: str | Path):
        from torchvision.models import inception_v3

        self.net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        self.net.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.net.eval()
        self._digest = hashlib.sha256(Path(weights_path).read_bytes()).hexdigest()[:16]
        self.name = "inception-v3"
        self._pool = None
        self.net.avgpool.register_forward_hook(lambda m, i, o: setattr(self, "_pool", o.flatten(1)))

    def _run(self, images):
        x = F.interpolate(_as_batch(images).float(), size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self.net((x - mean) / std)

    @torch.no_grad()
    def embed(self, images):
        self._run(images)
        return self._pool.double().numpy()

    @torch.no_grad()
    def classify(self, images):
        return torch.softmax(self._run(images).double(), dim=1).numpy()

    @property
    def fingerprint(self) -> str:
        return self._digest


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricRow:
    count: int
    ssim: float | None = None
    fid: float | None = None
    kid: float | None = None
    inception_score: float | None = None


@dataclass
class MetricReport:
    mode: str
    backend: str
    backend_hash: str
    rows: dict[str, MetricRow] = field(default_factory=dict)
    label: str = ""

    def to_dict(self) -> dict:
        return {"mode": self.mode, "backend": self.backend, "backend_hash": self.backend_hash,
                "label": self.label, "rows": {k: asdict(v) for k, v in self.rows.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(mode=d["mode"], backend=d["backend"], backend_hash=d["backend_hash"],
                   label=d.get("label", ""), rows={k: MetricRow(**v) for k, v in d["rows"].items()})

    def format_table(self) -> str:
        cols = ("SSIM", "FID", "KID", "IS")
        header = f"{'':12s}" + "".join(f"{c:>10s}" for c in cols) + f"{'n':>6s}"
        lines = [f"[{self.mode}] backend={self.backend}#{self.backend_hash}", header]
        for name in REPORT_ROWS:
            row = self.rows.get(name)
            if row is None:
                continue
            vals = (row.ssim, row.fid, row.kid, row.inception_score)
            cells = "".join(f"{'-':>10s}" if v is None else f"{v:10.4f}" for v in vals)
            lines.append(f"{name:12s}{cells}{row.count:6d}")
        return "\n".join(lines)


def _safe(fn, *args):
    try:
        return fn(*args)
    except ValueError as err:
        log.warning("metric skipped: %s", err)
        return None


def report_from_images(generated: Sequence, real: Sequence, categories: Sequence[str],
                       backend: EmbeddingBackend, mode: str,
                       ssim_references: Sequence | None = None, label: str = "") -> MetricReport:
    """Build a report from generated images, a real reference set and per-image categories.

    ``ssim_references`` (aligned with ``generated``) enables the SSIM column.
    """
    if len(generated) == 0:
        raise ValueError("empty evaluation set")
    gen = torch.stack([_as_batch(g)[0] for g in generated])
    ref = torch.stack([_as_batch(r)[0] for r in real])
    cats = np.asarray([str(getattr(c, "value", c)) for c in categories])
    gen_feats, ref_feats, gen_probs = backend.embed(gen), backend.embed(ref), backend.classify(gen)
    ssims = None
    if ssim_references is not None:
        ssims = np.array([ssim(g, r) for g, r in zip(generated, ssim_references)])
    report = MetricReport(mode=mode, backend=backend.name, backend_hash=backend.fingerprint, label=label)
    for name in REPORT_ROWS:
        sel = np.ones(len(cats), bool) if name == "all" else cats == name
        if not sel.any():
            continue
        report.rows[name] = MetricRow(
            count=int(sel.sum()),
            ssim=None if ssims is None else float(ssims[sel].mean()),
            fid=_safe(fid, gen_feats[sel], ref_feats[sel]),
            kid=_safe(kid, gen_feats[sel], ref_feats[sel]),
            inception_score=float(inception_score(gen_probs[sel])),
        )
    return report


def evaluate(bundle, records: Sequence, mode: str = "paired",
             backend: EmbeddingBackend | None = None) -> MetricReport:
    """Run the bundle on a test split and score it.

    paired: garment of the same record, SSIM against the ground truth plus the
    distribution metrics. unpaired: garments shifted by one within each
    category, no SSIM.
    """
    from .dataset import CATEGORIES
    from .pipeline.inference import tryon_once

    if len(records) == 0:
        raise ValueError("empty split")
    backend = backend or SeededConvBackend()
    generated, categories, refs = [], [], []
    for category in CATEGORIES:
        group = [r for r in records if r.category == category]
        for i, record in enumerate(group):
            donor = group[i] if mode == "paired" else group[(i + 1) % len(group)]
            generated.append(tryon_once(bundle, record, donor.garment_image, category))
            categories.append(category)
            refs.append(record.model_image)
    real = [r.model_image for c in CATEGORIES for r in records if r.category == c]
    return report_from_images(generated, real, categories, backend, mode,
                              ssim_references=refs if mode == "paired" else None)


def merge_protocol(paired: MetricReport, unpaired: MetricReport, label: str = "") -> MetricReport:
    """Paired SSIM with unpaired FID / KID / IS, the shipped evaluation protocol."""
    rows = {}
    for name, row in unpaired.rows.items():
        p = paired.rows.get(name)
        rows[name] = MetricRow(count=row.count, ssim=p.ssim if p else None, fid=row.fid,
                               kid=row.kid, inception_score=row.inception_score)
    return MetricReport(mode="protocol", backend=unpaired.backend, backend_hash=unpaired.backend_hash,
                        rows=rows, label=label)

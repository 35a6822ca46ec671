"""Verification backend: embedding extraction, two-covariance PLDA with EM,
cosine scoring, interpolated EER, and the rate-sweep report tables.

The verification embedding is the identity branch of the decomposition
(before the cosine mapping). PLDA models a speaker mean drawn from
N(mu, B) with per-utterance residuals N(0, W); trial scores are the
same-vs-different-speaker log-likelihood ratio in closed form.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .corpus import Trial, UtteranceRecord
from .errors import DataError, NumericalError, TooShortError
from .model import ModelParams, decompose_forward, encode_forward

log = logging.getLogger(__name__)


@dataclass
class EmbeddingSet:
    """Per-utterance identity embeddings plus optional preprocessing state."""

    vectors: dict[str, np.ndarray]
    mean: np.ndarray | None = None
    whitener: np.ndarray | None = None

    def __post_init__(self) -> None:
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent embedding shapes: {dims}")
        if self.whitener is not None:
            if abs(np.linalg.det(self.whitener)) < 1e-300:
                raise ValueError("whitening transform must be invertible")

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, utt_id: str) -> np.ndarray:
        return self.vectors[utt_id]

    def __contains__(self, utt_id: str) -> bool:
        return utt_id in self.vectors


def extract_embeddings(
    params: ModelParams,
    records: Sequence[UtteranceRecord],
    features,
) -> tuple[EmbeddingSet, list[str]]:
    """Full-utterance forward pass per record, keeping the identity branch.

    Utterances shorter than the receptive field are skipped and reported.
    """
    vectors: dict[str, np.ndarray] = {}
    skipped: list[str] = []
    for r in records:
        if r.utt_id not in features:
            skipped.append(f"{r.utt_id}: no features")
            continue
        frames = features[r.utt_id]
        try:
            phi, _ = encode_forward(frames, params)
        except TooShortError as exc:
            skipped.append(f"{r.utt_id}: {exc}")
            continue
        x_id, _, _, _ = decompose_forward(phi, params)
        vectors[r.utt_id] = x_id
    return EmbeddingSet(vectors), skipped


# ---------------------------------------------------------------------------
# PLDA (two-covariance model)
# ---------------------------------------------------------------------------

@dataclass
class PldaModel:
    mu: np.ndarray
    between: np.ndarray  # B: speaker-mean covariance
    within: np.ndarray  # W: residual covariance


@dataclass
class PldaBackend:
    """Trained PLDA plus the preprocessing applied to every vector."""

    model: PldaModel
    center: np.ndarray
    length_norm: bool
    loglik_history: list[float] = field(default_factory=list)
    _scorer: "_PldaScorer | None" = None

    def preprocess(self, x: np.ndarray) -> np.ndarray:
        y = np.asarray(x, dtype=np.float64) - self.center
        if self.length_norm:
            y = y / max(np.linalg.norm(y), 1e-12)
        return y

    def score(self, enroll: np.ndarray, test: np.ndarray) -> float:
        if self._scorer is None:
            self._scorer = _PldaScorer(self.model)
        return self._scorer.llr(self.preprocess(enroll), self.preprocess(test))


class CosineBackend:
    """Inner product of unit-normalized embeddings."""

    def score(self, enroll: np.ndarray, test: np.ndarray) -> float:
        e = np.asarray(enroll, dtype=np.float64)
        t = np.asarray(test, dtype=np.float64)
        if e.shape != t.shape:
            raise DataError(f"embedding dims differ: {e.shape} vs {t.shape}")
        e = e / max(np.linalg.norm(e), 1e-12)
        t = t / max(np.linalg.norm(t), 1e-12)
        return float(np.dot(e, t))


def _speaker_stats(groups: dict[str, list[np.ndarray]]):
    counts, means, scatters = [], [], []
    for vecs in groups.values():
        m = np.stack(vecs)
        counts.append(m.shape[0])
        mean = m.mean(axis=0)
        means.append(mean)
        dev = m - mean
        scatters.append(dev.T @ dev)
    return np.array(counts), np.stack(means), scatters


def _total_loglik(counts, means, scatters, mu, B, W) -> float:
    """Exact marginal log-likelihood of the two-covariance model."""
    d = mu.size
    sign_w, logdet_w = np.linalg.slogdet(W)
    if sign_w <= 0:
        raise NumericalError("within covariance is not positive definite")
    w_inv = np.linalg.inv(W)
    ll = 0.0
    for n in np.unique(counts):
        sel = counts == n
        cov = B + W / n
        sign_c, logdet_c = np.linalg.slogdet(cov)
        if sign_c <= 0:
            raise NumericalError("B + W/n is not positive definite")
        c_inv = np.linalg.inv(cov)
        dev = means[sel] - mu
        quad = np.einsum("ij,jk,ik->i", dev, c_inv, dev)
        ll += np.sum(-0.5 * (d * np.log(2 * np.pi) + logdet_c + quad))
        ll += -0.5 * int(sel.sum()) * (
            (n - 1) * d * np.log(2 * np.pi) + (n - 1) * logdet_w + d * np.log(n)
        )
    for s in scatters:
        ll += -0.5 * float(np.sum(w_inv * s))
    return float(ll)


def train_plda(
    groups: dict[str, list[np.ndarray]],
    n_iter: int = 10,
    length_norm: bool = True,
    ridge: float = 1e-6,
) -> PldaBackend:
    """EM for the two-covariance model on speaker-grouped embeddings.

    Vectors are centered and (optionally) length-normalized first. A near-
    singular within covariance is ridge-regularized with a logged epsilon.
    The marginal log-likelihood after each iteration is recorded.
    """
    if len(groups) < 2:
        raise DataError("PLDA training needs at least 2 speakers")
    if not any(len(v) >= 2 for v in groups.values()):
        raise DataError("PLDA training needs speakers with at least 2 utterances")
    raw = np.vstack([np.asarray(v, dtype=np.float64) for v in groups.values()])
    center = raw.mean(axis=0)

    def prep(x):
        y = np.asarray(x, dtype=np.float64) - center
        if length_norm:
            y = y / max(np.linalg.norm(y), 1e-12)
        return y

    prepped = {spk: [prep(v) for v in vecs] for spk, vecs in groups.items()}
    counts, means, scatters = _speaker_stats(prepped)
    d = means.shape[1]
    n_total = int(counts.sum())
    all_vecs = np.vstack([np.stack(v) for v in prepped.values()])
    total_cov = np.cov(all_vecs.T, bias=True) + ridge * np.eye(d)
    scatter_sum = sum(scatters)
    second_moment = all_vecs.T @ all_vecs

    mu = all_vecs.mean(axis=0)
    B = 0.5 * total_cov
    W = 0.5 * total_cov

    history: list[float] = []
    for _ in range(n_iter):
        # E-step: posterior of each speaker mean, shared across equal counts
        b_inv = np.linalg.inv(B)
        w_inv = np.linalg.inv(W)
        y_hat = np.empty_like(means)
        c_post = {int(n): np.linalg.inv(b_inv + n * w_inv) for n in np.unique(counts)}
        for i, n in enumerate(counts):
            c = c_post[int(n)]
            y_hat[i] = c @ (b_inv @ mu + n * (w_inv @ means[i]))
        # M-step
        mu = y_hat.mean(axis=0)
        dev = y_hat - mu
        B = (dev.T @ dev + sum(c_post[int(n)] for n in counts)) / len(counts)
        cross = (counts[:, None] * means).T @ y_hat
        w_new = (
            second_moment
            - cross
            - cross.T
            + (counts[:, None] * y_hat).T @ y_hat
            + sum(n * c_post[int(n)] for n in counts)
        ) / n_total
        W = 0.5 * (w_new + w_new.T)
        B = 0.5 * (B + B.T)
        min_eig = float(np.linalg.eigvalsh(W).min())
        if min_eig < 1e-10:
            eps = 1e-8 + max(0.0, -min_eig)
            log.warning("within covariance near-singular; adding ridge %.3e", eps)
            W = W + eps * np.eye(d)
        history.append(_total_loglik(counts, means, scatters, mu, B, W))

    backend = PldaBackend(PldaModel(mu, B, W), center, length_norm, history)
    return backend


class _PldaScorer:
    """Closed-form same/different LLR with precomputed joint precisions."""

    def __init__(self, model: PldaModel):
        d = model.mu.size
        tot = model.between + model.within
        joint_same = np.block([[tot, model.between], [model.between, tot]])
        joint_diff = np.block([[tot, np.zeros((d, d))], [np.zeros((d, d)), tot]])
        sign_s, logdet_s = np.linalg.slogdet(joint_same)
        sign_d, logdet_d = np.linalg.slogdet(joint_diff)
        if sign_s <= 0 or sign_d <= 0:
            raise NumericalError("PLDA joint covariance is not positive definite")
        self.mu = model.mu
        self.p_same = np.linalg.inv(joint_same)
        self.p_diff = np.linalg.inv(joint_diff)
        self.const = -0.5 * (logdet_s - logdet_d)

    def llr(self, enroll: np.ndarray, test: np.ndarray) -> float:
        z = np.concatenate([enroll - self.mu, test - self.mu])
        quad = z @ (self.p_same - self.p_diff) @ z
        return float(self.const - 0.5 * quad)


def score_trial(backend, enroll_vec: np.ndarray, test_vec: np.ndarray) -> float:
    """Score one trial with a PLDA or cosine backend."""
    e = np.asarray(enroll_vec, dtype=np.float64)
    t = np.asarray(test_vec, dtype=np.float64)
    if e.shape != t.shape:
        raise DataError(f"embedding dims differ: {e.shape} vs {t.shape}")
    return float(backend.score(e, t))


class ScoredTrial(NamedTuple):
    enroll: str
    test: str
    target: bool
    score: float


def score_trials(backend, trials: Sequence[Trial], embeddings: EmbeddingSet) -> list[ScoredTrial]:
    scored = []
    for trial in trials:
        if trial.enroll not in embeddings or trial.test not in embeddings:
            raise DataError(f"trial references missing embedding: {trial.enroll} / {trial.test}")
        s = score_trial(backend, embeddings[trial.enroll], embeddings[trial.test])
        scored.append(ScoredTrial(trial.enroll, trial.test, trial.target, s))
    return scored


def write_scores(scored: Sequence[ScoredTrial], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scored:
            f.write(f"{s.enroll} {s.test} {s.score:.10g}\n")


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------

def compute_eer(target_scores, impostor_scores) -> tuple[float, float]:
    """Equal error rate of the linearly interpolated FAR/FRR curves.

    Operating points are taken at every distinct score (accept when
    score >= threshold) plus sentinels below and above all scores; the EER is
    where the interpolated FRR-FAR difference crosses zero. Returns
    (eer, threshold at the crossing).
    """
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    imp = np.sort(np.asarray(impostor_scores, dtype=np.float64))
    if tgt.size == 0 or imp.size == 0:
        raise DataError("EER needs at least one target and one impostor score")
    lo = min(tgt[0], imp[0]) - 1.0
    hi = max(tgt[-1], imp[-1]) + 1.0
    thresholds = np.concatenate(([lo], np.unique(np.concatenate([tgt, imp])), [hi]))
    far = 1.0 - np.searchsorted(imp, thresholds, side="left") / imp.size
    frr = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    diff = frr - far
    idx = int(np.argmax(diff >= 0.0))
    if diff[idx] == 0.0:
        return float((far[idx] + frr[idx]) / 2.0), float(thresholds[idx])
    a1, r1, t1 = far[idx - 1], frr[idx - 1], thresholds[idx - 1]
    a2, r2, t2 = far[idx], frr[idx], thresholds[idx]
    lam = (a1 - r1) / ((r2 - r1) - (a2 - a1))
    eer = a1 + lam * (a2 - a1)
    return float(eer), float(t1 + lam * (t2 - t1))


def eer_from_scored(scored: Sequence[ScoredTrial]) -> tuple[float, float]:
    tgt = [s.score for s in scored if s.target]
    imp = [s.score for s in scored if not s.target]
    return compute_eer(tgt, imp)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def format_sweep_table(eers: dict[str, dict[float, float]], title: str = "EER[%] by speaking-rate scale") -> str:
    """Systems-by-alpha text table (EER in percent)."""
    alphas = sorted({a for row in eers.values() for a in row})
    header = ["system"] + [f"{a:g}" for a in alphas]
    lines = [title, "  ".join(f"{h:>8}" for h in header)]
    for system in eers:
        cells = [f"{system:>8}"]
        for a in alphas:
            val = eers[system].get(a)
            cells.append(f"{100 * val:8.2f}" if val is not None else f"{'-':>8}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def format_three_rate_table(eers: dict[str, dict[str, float]]) -> str:
    """Systems-by-rate table with an Average column (same-rate protocol)."""
    rates = ("slow", "normal", "fast")
    header = ["system"] + list(rates) + ["average"]
    lines = ["EER[%] by speaking rate", "  ".join(f"{h:>8}" for h in header)]
    for system, row in eers.items():
        vals = [row[r] for r in rates]
        cells = [f"{system:>8}"] + [f"{100 * v:8.2f}" for v in vals]
        cells.append(f"{100 * float(np.mean(vals)):8.2f}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def rate_sweep_report(
    eers: dict[str, dict[float, float]],
    table_path=None,
    plot_path=None,
) -> str:
    """Emit the systems-by-alpha EER matrix as text and, optionally, a plot."""
    table = format_sweep_table(eers)
    if table_path is not None:
        with open(table_path, "w", encoding="utf-8") as f:
            f.write(table)
    if plot_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(7, 4))
        for system, row in eers.items():
            alphas = sorted(row)
            ax.plot(alphas, [100 * row[a] for a in alphas], marker="o", label=system)
        ax.set_xlabel("speaking-rate scale alpha")
        ax.set_ylabel("EER [%]")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    return table

"""Verifiable reward, group-relative advantages, SFT likelihood, and the clipped GRPO objective.

Everything here runs on toy categorical policies: a ``[positions, vocab]``
logit table whose rows are independent softmax distributions. That is enough
to pin down every formula and check analytic gradients against finite
differences.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import CANONICAL_ORDER, EmotionLabel, Lexicon, parse_label
from .errors import GroupTooSmall, ShapeMismatch, TokenOutOfVocab
from .extraction import extract_tagged

DEGENERATE_STD = 1e-8

_NO_TAG = r"(?:(?!</?think>|</?answer>).)*"
_FORMAT = re.compile(rf"\s*<think>{_NO_TAG}</think>\s*<answer>{_NO_TAG}</answer>\s*", re.DOTALL)


@dataclass(frozen=True)
class RewardBreakdown:
    acc: int
    format: int

    @property
    def total(self) -> int:
        return self.acc + self.format

    def to_dict(self) -> dict[str, int]:
        return {"acc": self.acc, "format": self.format, "total": self.total}


def format_ok(response: str) -> bool:
    """Exactly one think block followed by exactly one answer block, nothing else but whitespace."""
    return _FORMAT.fullmatch(response) is not None


def reward(
    response_text: str,
    gt: EmotionLabel,
    candidates: Sequence[EmotionLabel] = CANONICAL_ORDER,
    lexicon: Lexicon | None = None,
) -> RewardBreakdown:
    """Rule-based reward: accuracy is judged on the answer-tag content only."""
    answer = extract_tagged(response_text, "answer")
    acc = int(answer is not None and parse_label(answer, candidates, lexicon) == EmotionLabel(gt))
    return RewardBreakdown(acc=acc, format=int(format_ok(response_text)))


def group_advantages(rewards: Sequence[float]) -> list[float]:
    """(R_i - mean) / std with population std; degenerate groups give all zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupTooSmall(f"need at least 2 rewards per group, got {r.size}")
    std = r.std()
    if std < DEGENERATE_STD:
        return [0.0] * r.size
    return ((r - r.mean()) / std).tolist()


# --- toy policy -------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class ToyPolicy:
    logits: np.ndarray  # [positions, vocab]

    def __post_init__(self) -> None:
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 2 or 0 in self.logits.shape:
            raise ShapeMismatch(f"logits must be a non-empty [positions, vocab] array, got {self.logits.shape}")

    @property
    def length(self) -> int:
        return self.logits.shape[0]

    @property
    def vocab(self) -> int:
        return self.logits.shape[1]

    def logprobs(self) -> np.ndarray:
        return log_softmax(self.logits)

    def probs(self) -> np.ndarray:
        return np.exp(self.logprobs())

    def check_tokens(self, tokens: Sequence[int]) -> np.ndarray:
        t = np.asarray(tokens)
        if t.ndim != 1 or t.size > self.length:
            raise ShapeMismatch(f"token sequence of shape {t.shape} does not fit {self.length} positions")
        if t.size and (not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= self.vocab):
            raise TokenOutOfVocab(f"tokens must be integers in [0, {self.vocab})")
        return t.astype(np.int64)

    def sequence_logprob(self, tokens: Sequence[int]) -> float:
        t = self.check_tokens(tokens)
        return float(self.logprobs()[np.arange(t.size), t].sum())


def _onehot(tokens: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    out = np.zeros(shape)
    out[np.arange(tokens.size), tokens] = 1.0
    return out


def sft_nll(policy: ToyPolicy, target: Sequence[int]) -> float:
    """Teacher-forced negative log-likelihood of ``target``; SFT minimizes this."""
    return -policy.sequence_logprob(target)


def sft_gradient(policy: ToyPolicy, target: Sequence[int]) -> np.ndarray:
    """d(sft_nll)/d(logits): softmax minus one-hot on every target position."""
    t = policy.check_tokens(target)
    grad = np.zeros_like(policy.logits)
    n = t.size
    grad[:n] = policy.probs()[:n] - _onehot(t, (n, policy.vocab))
    return grad


# --- GRPO --------------------------------------------------------------------------

@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.04
    group_size: int = 8

    def __post_init__(self) -> None:
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")


@dataclass
class RolloutGroup:
    """G sampled responses for one prompt plus the snapshot of the sampling policy.

    ``old_logits`` is the full parameter table of the policy that produced the
    samples; the exact KL term needs its per-position distributions.
    """

    responses: np.ndarray  # [G, positions] int
    old_logprobs: np.ndarray  # [G]
    old_logits: np.ndarray  # [positions, vocab]
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prompt_id: int = 0

    def __post_init__(self) -> None:
        self.responses = np.asarray(self.responses, dtype=np.int64)
        self.old_logprobs = np.asarray(self.old_logprobs, dtype=np.float64)
        self.old_logits = np.asarray(self.old_logits, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        g = self.responses.shape[0] if self.responses.ndim == 2 else -1
        if g < 2:
            raise ShapeMismatch(f"responses must be [G>=2, positions], got {self.responses.shape}")
        for name in ("old_logprobs", "rewards", "advantages"):
            arr = getattr(self, name)
            if arr.size and arr.shape != (g,):
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected ({g},)")

    @property
    def size(self) -> int:
        return self.responses.shape[0]

    def with_rewards(self, rewards: Sequence[float]) -> "RolloutGroup":
        """Attach rewards and their group-normalized advantages."""
        return RolloutGroup(
            self.responses, self.old_logprobs, self.old_logits,
            np.asarray(rewards, dtype=np.float64), np.asarray(group_advantages(rewards)), self.prompt_id,
        )


def _validate(policy: ToyPolicy, group: RolloutGroup) -> None:
    if group.advantages.shape != (group.size,) or group.old_logprobs.shape != (group.size,):
        raise ShapeMismatch("group needs one advantage and one old logprob per response")
    if group.old_logits.shape != policy.logits.shape:
        raise ShapeMismatch(f"old policy shape {group.old_logits.shape} != policy shape {policy.logits.shape}")
    if group.responses.shape[1] != policy.length:
        raise ShapeMismatch(f"responses have {group.responses.shape[1]} positions, policy has {policy.length}")
    if group.responses.min() < 0 or group.responses.max() >= policy.vocab:
        raise TokenOutOfVocab(f"response tokens must lie in [0, {policy.vocab})")
    if not np.all(np.isfinite(group.old_logprobs)):
        raise ValueError("old_logprobs must be finite")


def _ratios(policy: ToyPolicy, group: RolloutGroup) -> tuple[np.ndarray, np.ndarray]:
    logp = policy.logprobs()
    rows = np.arange(policy.length)
    seq_logp = logp[rows, group.responses].sum(axis=1)
    return np.exp(seq_logp - group.old_logprobs), logp


def exact_kl(logits: np.ndarray, old_logits: np.ndarray) -> float:
    """Sum over positions of KL(softmax(logits) || softmax(old_logits))."""
    lp, lq = log_softmax(logits), log_softmax(old_logits)
    return float((np.exp(lp) * (lp - lq)).sum())


def grpo_objective(policy: ToyPolicy, group: RolloutGroup, cfg: GrpoConfig) -> float:
    """Clipped surrogate averaged over the group minus beta times the exact KL to the old policy."""
    _validate(policy, group)
    rho, _ = _ratios(policy, group)
    a = group.advantages
    clipped = np.clip(rho, 1 - cfg.epsilon, 1 + cfg.epsilon)
    surrogate = np.minimum(rho * a, clipped * a).mean()
    return float(surrogate - cfg.beta * exact_kl(policy.logits, group.old_logits))


def grpo_gradient(policy: ToyPolicy, group: RolloutGroup, cfg: GrpoConfig) -> np.ndarray:
    """Analytic gradient of :func:`grpo_objective` with respect to every logit.

    A response contributes ``A_i * rho_i * d log pi(O_i)`` while the unclipped
    term is the active branch of the min, and nothing once clipping saturates
    (A > 0 with rho > 1 + eps, or A < 0 with rho < 1 - eps).
    """
    _validate(policy, group)
    rho, logp = _ratios(policy, group)
    p = np.exp(logp)
    a = group.advantages
    lo, hi = 1 - cfg.epsilon, 1 + cfg.epsilon
    saturated = ((a > 0) & (rho > hi)) | ((a < 0) & (rho < lo))
    weight = np.where(saturated, 0.0, a * rho) / group.size

    grad = np.zeros_like(policy.logits)
    rows = np.arange(policy.length)
    for w, tokens in zip(weight, group.responses):
        if w:
            grad[rows, tokens] += w
            grad -= w * p
    if cfg.beta:
        diff = logp - log_softmax(group.old_logits)
        kl_rows = (p * diff).sum(axis=1, keepdims=True)
        grad -= cfg.beta * p * (diff - kl_rows)
    return grad


def toy_rollout(policy: ToyPolicy, prompt_id: int, group_size: int, rng_seed: int) -> RolloutGroup:
    """Sample ``group_size`` full-length sequences; advantages start at zero until rewards arrive."""
    if group_size < 2:
        raise GroupTooSmall(f"group size must be >= 2, got {group_size}")
    rng = np.random.default_rng([rng_seed, prompt_id])
    probs = policy.probs()
    cum = np.cumsum(probs, axis=1)
    u = rng.random((group_size, policy.length))
    responses = np.empty((group_size, policy.length), dtype=np.int64)
    for t in range(policy.length):
        responses[:, t] = np.minimum(np.searchsorted(cum[t], u[:, t], side="right"), policy.vocab - 1)
    logp = policy.logprobs()
    old = logp[np.arange(policy.length), responses].sum(axis=1)
    return RolloutGroup(
        responses=responses,
        old_logprobs=old,
        old_logits=policy.logits.copy(),
        rewards=np.zeros(group_size),
        advantages=np.zeros(group_size),
        prompt_id=prompt_id,
    )


# --- finite-difference verification -------------------------------------------------

def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = f(x)
        x[idx] = orig - step
        down = f(x)
        x[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


FD_FLOOR = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FD_FLOOR) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    Central differences with step 1e-5 resolve an entry only to about 1e-11
    absolute (rounding plus truncation), so entries smaller than ``floor``
    are judged on absolute error scaled by ``floor`` instead.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def random_instance(
    rng: np.random.Generator,
    max_vocab: int = 10,
    max_len: int = 5,
    max_group: int = 8,
    cfg: GrpoConfig | None = None,
    drift: float = 0.5,
    kink_margin: float = 1e-3,
) -> tuple[ToyPolicy, RolloutGroup, GrpoConfig]:
    """Random toy policy, an on-policy group from a perturbed old policy, and a config.

    Instances where some ratio sits within ``kink_margin`` of a clip boundary
    are redrawn: the objective is not differentiable there.
    """
    while True:
        vocab = int(rng.integers(2, max_vocab + 1))
        length = int(rng.integers(1, max_len + 1))
        g = int(rng.integers(2, max_group + 1))
        conf = cfg or GrpoConfig(
            epsilon=float(rng.uniform(0.05, 0.4)), beta=float(rng.uniform(0.0, 0.5)), group_size=g
        )
        old = ToyPolicy(rng.normal(0, 1, (length, vocab)))
        group = toy_rollout(old, prompt_id=int(rng.integers(1 << 30)), group_size=g, rng_seed=int(rng.integers(1 << 30)))
        rewards = rng.integers(0, 3, g).astype(float)
        group = group.with_rewards(rewards)
        policy = ToyPolicy(old.logits + rng.normal(0, drift, old.logits.shape))
        rho, _ = _ratios(policy, group)
        edges = np.array([1 - conf.epsilon, 1 + conf.epsilon])
        if np.min(np.abs(rho[:, None] - edges[None, :])) > kink_margin:
            return policy, group, conf


def check_gradients(instances: int = 50, seed: int = 0, step: float = 1e-5, tol: float = 1e-6) -> dict:
    """Compare analytic GRPO and SFT gradients with central differences on random toy instances."""
    rng = np.random.default_rng(seed)
    grpo_err = sft_err = grpo_abs = sft_abs = 0.0
    for _ in range(instances):
        policy, group, cfg = random_instance(rng)
        numeric = central_difference(lambda th: grpo_objective(ToyPolicy(th), group, cfg), policy.logits.copy(), step)
        analytic = grpo_gradient(policy, group, cfg)
        grpo_err = max(grpo_err, relative_error(analytic, numeric))
        grpo_abs = max(grpo_abs, float(np.max(np.abs(analytic - numeric))))
        target = rng.integers(0, policy.vocab, int(rng.integers(1, policy.length + 1)))
        numeric = central_difference(lambda th: sft_nll(ToyPolicy(th), target), policy.logits.copy(), step)
        analytic = sft_gradient(policy, target)
        sft_err = max(sft_err, relative_error(analytic, numeric))
        sft_abs = max(sft_abs, float(np.max(np.abs(analytic - numeric))))
    return {
        "instances": instances,
        "seed": seed,
        "step": step,
        "tolerance": tol,
        "floor": FD_FLOOR,
        "grpo": {"max_relative_error": grpo_err, "max_abs_error": grpo_abs, "pass": grpo_err <= tol},
        "sft": {"max_relative_error": sft_err, "max_abs_error": sft_abs, "pass": sft_err <= tol},
        "pass": grpo_err <= tol and sft_err <= tol,
    }


"""Group-based policy optimization at desk scale.

A tiny autoregressive policy emits m reasoning words (anomaly-word vs filler,
one categorical per step), then a Yes/No answer. Each rollout renders a
response string plus a synthetic attention record, and earns format, accuracy,
and consistency rewards through the real scoring pipeline. Sequence
log-probabilities and the per-step KL to a reference policy are exact, so the
clipped-surrogate gradient can be written in closed form and checked against
finite differences.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .consistency import ConsistencyConfig, ConsistencyOutcome, evaluate_consistency
from .dump import (
    AGG_MEAN,
    ROLE_ANSWER,
    ROLE_REASONING,
    SCHEMA_VERSION,
    AttentionRecord,
    DumpManifest,
    GeneratedToken,
)
from .errors import DivergedNonFinite, GroupTooSmall, NonFiniteLogProb
from .scoring import ScoringConfig, score_reasoning_tokens
from .synth import (
    ANOMALY_TEXT_INDICES,
    ANOMALY_WORDS,
    FILLER_WORDS,
    PROMPT_TOKENS,
    diffuse_patch_row,
    focused_patch_row,
    lexicon_text_row,
    render_response,
    sample_region,
    region_cell_indices,
    uniform_text_row,
)

ANSWERS = ("Yes", "No")
ADVANTAGE_EPS = 1e-8

_RESPONSE_RE = re.compile(r"\A<think>(.*?)</think>\s*<answer>(Yes|No)</answer>\Z", re.DOTALL)

# theta layout: [lexical logit anomaly-word, lexical logit filler,
#                answer logit Yes, answer logit No, focus parameter c]
THETA_DIM = 5
DEFAULT_THETA = (0.0, 0.0, 0.0, 0.0, 2.0)


# --- scalar rewards ----------------------------------------------------------


def parse_response(text: str) -> tuple[str, str] | None:
    """Split a canonical response into (reasoning, answer); None if malformed."""
    m = _RESPONSE_RE.match(text)
    if m is None:
        return None
    return m.group(1), m.group(2)


def format_reward(text: str) -> int:
    """1 iff the response is reasoning markup followed by a Yes/No answer, nothing after."""
    return int(parse_response(text) is not None)


def accuracy_reward(answer: str | None, label: int) -> int:
    """1 iff the parsed answer matches the image label; unparseable answers score 0."""
    if answer == "Yes":
        return int(label == 1)
    if answer == "No":
        return int(label == 0)
    return 0


def total_reward(r_fmt: int, r_acc: int, r_cons: int) -> int:
    return r_fmt + r_acc + r_cons


@dataclass
class RewardBundle:
    r_fmt: int
    r_acc: int
    r_cons: int
    total: int
    consistency: ConsistencyOutcome | None


# --- group statistics --------------------------------------------------------


def normalize_advantages(rewards: list[float] | np.ndarray) -> np.ndarray:
    """Group-normalized advantages: (r - mean) / (population std + 1e-8)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"group size {r.size} < 2")
    std = float(r.std())  # population (divide by G)
    return (r - r.mean()) / (std + ADVANTAGE_EPS)


# --- toy policy --------------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max()
    return z - zmax - np.log(np.exp(z - zmax).sum())


def _softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(z))


def sigmoid(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


def sequence_logp(theta: np.ndarray, n_anomaly_words: int, m: int, answer_index: int) -> float:
    """Exact log-probability of a rollout under the factorized policy."""
    lex = _log_softmax(np.asarray(theta[0:2], dtype=np.float64))
    ans = _log_softmax(np.asarray(theta[2:4], dtype=np.float64))
    return float(n_anomaly_words * lex[0] + (m - n_anomaly_words) * lex[1] + ans[answer_index])


def _categorical_kl(z_p: np.ndarray, z_q: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(p || q) for two logit vectors, plus its gradient w.r.t. z_p."""
    logp = _log_softmax(np.asarray(z_p, dtype=np.float64))
    logq = _log_softmax(np.asarray(z_q, dtype=np.float64))
    p = np.exp(logp)
    u = logp - logq
    kl = float((p * u).sum())
    return kl, p * (u - kl)


def sequence_kl(theta: np.ndarray, theta_ref: np.ndarray, m: int) -> float:
    """Per-response KL to the reference policy, summed over the m+1 steps."""
    kl_lex, _ = _categorical_kl(theta[0:2], theta_ref[0:2])
    kl_ans, _ = _categorical_kl(theta[2:4], theta_ref[2:4])
    return m * kl_lex + kl_ans


# --- toy environment ---------------------------------------------------------


@dataclass
class ToyEnvConfig:
    patch_grid_side: int = 12
    reasoning_length: int = 6
    map_noise: float = 0.6
    text_noise: float = 0.1
    region_area: tuple[float, float] = (0.042, 0.0625)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    k: int = 3
    delta1: float = 0.3
    delta2: float = 0.1
    support_quantile: float = 0.95

    def consistency_config(self) -> ConsistencyConfig:
        return ConsistencyConfig(
            k=self.k,
            delta1=self.delta1,
            delta2=self.delta2,
            support_quantile=self.support_quantile,
        )


@dataclass
class ToyScene:
    patch_grid_side: int
    label: int
    rect: tuple[int, int, int, int] | None  # planted rectangle, None for normal scenes
    region_cells: np.ndarray | None


def sample_scene(env: ToyEnvConfig, label: int, rng: np.random.Generator) -> ToyScene:
    P = env.patch_grid_side
    rect = sample_region(P, rng, env.region_area) if label == 1 else None
    cells = region_cell_indices(P, rect) if rect is not None else None
    return ToyScene(patch_grid_side=P, label=label, rect=rect, region_cells=cells)


@dataclass
class Rollout:
    words: list[str]
    n_anomaly_words: int
    answer_index: int
    response_text: str
    bundle: RewardBundle


def _rollout_record(
    is_anomaly_word: np.ndarray,
    answer: str,
    scene: ToyScene,
    focus: float,
    env: ToyEnvConfig,
    rng: np.random.Generator,
) -> tuple[DumpManifest, AttentionRecord, list[str]]:
    P = env.patch_grid_side
    m = env.reasoning_length
    n_i = len(PROMPT_TOKENS)
    tokens: list[GeneratedToken] = []
    patch_rows: list[np.ndarray] = []
    text_rows: list[np.ndarray] = []
    words: list[str] = []
    for pos in range(m):
        if is_anomaly_word[pos]:
            word = ANOMALY_WORDS[pos % len(ANOMALY_WORDS)]
            if scene.region_cells is not None:
                patch_rows.append(
                    focused_patch_row(P, scene.region_cells, focus, rng, env.map_noise)
                )
            else:
                patch_rows.append(diffuse_patch_row(P, rng, env.map_noise))
            text_rows.append(lexicon_text_row(n_i, ANOMALY_TEXT_INDICES, rng, env.text_noise))
        else:
            word = FILLER_WORDS[pos % len(FILLER_WORDS)]
            patch_rows.append(diffuse_patch_row(P, rng, env.map_noise))
            text_rows.append(uniform_text_row(n_i, rng, env.text_noise))
        words.append(word)
        tokens.append(GeneratedToken(index=pos, text=word, role=ROLE_REASONING))
    tokens.append(GeneratedToken(index=m, text=answer, role=ROLE_ANSWER))
    patch_rows.append(diffuse_patch_row(P, rng, env.map_noise))
    text_rows.append(uniform_text_row(n_i, rng, env.text_noise))
    manifest = DumpManifest(
        schema_version=SCHEMA_VERSION,
        sample_id="toy",
        label=scene.label,
        patch_grid_side=P,
        n_input_text=n_i,
        n_output=m + 1,
        image_height=P,
        image_width=P,
        generated_tokens=tokens,
        anomaly_text_indices=list(ANOMALY_TEXT_INDICES),
        answer_text=render_response(words, answer),
        aggregation_mode=AGG_MEAN,
    )
    record = AttentionRecord(
        attn_to_patches=np.stack(patch_rows).astype(np.float32),
        attn_to_text=np.stack(text_rows).astype(np.float32),
    )
    return manifest, record, words


def reward_bundle(
    manifest: DumpManifest, record: AttentionRecord, env: ToyEnvConfig
) -> RewardBundle:
    """Format, accuracy, and consistency rewards for one rendered response.

    Consistency is evaluated only when a parseable reasoning span with
    reasoning tokens exists; otherwise it scores 0.
    """
    parsed = parse_response(manifest.answer_text)
    r_fmt = int(parsed is not None)
    answer = parsed[1] if parsed else None
    r_acc = accuracy_reward(answer, manifest.label)
    r_cons = 0
    outcome: ConsistencyOutcome | None = None
    if parsed is not None:
        scores = score_reasoning_tokens(record, manifest, env.scoring)
        outcome = evaluate_consistency(scores.tokens, record, manifest, env.consistency_config())
        r_cons = outcome.reward
    return RewardBundle(
        r_fmt=r_fmt,
        r_acc=r_acc,
        r_cons=r_cons,
        total=total_reward(r_fmt, r_acc, r_cons),
        consistency=outcome,
    )


def run_rollout(
    theta: np.ndarray, scene: ToyScene, env: ToyEnvConfig, rng: np.random.Generator
) -> Rollout:
    m = env.reasoning_length
    p_anom = _softmax(np.asarray(theta[0:2], dtype=np.float64))[0]
    p_yes = _softmax(np.asarray(theta[2:4], dtype=np.float64))[0]
    is_anom = rng.random(m) < p_anom
    answer_index = 0 if rng.random() < p_yes else 1
    manifest, record, words = _rollout_record(
        is_anom, ANSWERS[answer_index], scene, sigmoid(float(theta[4])), env, rng
    )
    bundle = reward_bundle(manifest, record, env)
    return Rollout(
        words=words,
        n_anomaly_words=int(is_anom.sum()),
        answer_index=answer_index,
        response_text=manifest.answer_text,
        bundle=bundle,
    )


# --- policy group ------------------------------------------------------------


@dataclass
class PolicyGroup:
    rollouts: list[Rollout]
    rewards: np.ndarray
    advantages: np.ndarray
    word_counts: np.ndarray  # anomaly-word count per response
    answer_indices: np.ndarray
    reasoning_length: int
    logp_current: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    kl_per_response: np.ndarray
    clip_eps: float
    kl_coeff: float
    theta_ref: np.ndarray


def sample_group(
    theta: np.ndarray,
    scene: ToyScene,
    group_size: int,
    seed: int | np.random.SeedSequence,
    env: ToyEnvConfig | None = None,
    theta_ref: np.ndarray | None = None,
    clip_eps: float = 0.2,
    kl_coeff: float = 0.04,
) -> PolicyGroup:
    """Sample G independent rollouts and score them; deterministic given seed."""
    if group_size < 2:
        raise GroupTooSmall(f"group size {group_size} < 2")
    env = env or ToyEnvConfig()
    theta = np.asarray(theta, dtype=np.float64)
    theta_ref = theta.copy() if theta_ref is None else np.asarray(theta_ref, dtype=np.float64)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rollouts = [
        run_rollout(theta, scene, env, np.random.default_rng(child))
        for child in ss.spawn(group_size)
    ]
    rewards = np.array([float(r.bundle.total) for r in rollouts])
    counts = np.array([r.n_anomaly_words for r in rollouts])
    answers = np.array([r.answer_index for r in rollouts])
    m = env.reasoning_length
    logp = np.array([sequence_logp(theta, c, m, a) for c, a in zip(counts, answers)])
    kl = np.full(group_size, sequence_kl(theta, theta_ref, m))
    return PolicyGroup(
        rollouts=rollouts,
        rewards=rewards,
        advantages=normalize_advantages(rewards),
        word_counts=counts,
        answer_indices=answers,
        reasoning_length=m,
        logp_current=logp.copy(),
        logp_old=logp.copy(),
        logp_ref=np.array([sequence_logp(theta_ref, c, m, a) for c, a in zip(counts, answers)]),
        kl_per_response=kl,
        clip_eps=clip_eps,
        kl_coeff=kl_coeff,
        theta_ref=theta_ref,
    )


def clipped_surrogate(group: PolicyGroup) -> float:
    """Mean clipped importance-ratio term minus the KL penalty."""
    for name, arr in (
        ("logp_current", group.logp_current),
        ("logp_old", group.logp_old),
        ("logp_ref", group.logp_ref),
    ):
        if not np.isfinite(arr).all():
            raise NonFiniteLogProb(f"{name}: contains non-finite values")
    rho = np.exp(group.logp_current - group.logp_old)
    clipped = np.clip(rho, 1.0 - group.clip_eps, 1.0 + group.clip_eps)
    term = np.minimum(rho * group.advantages, clipped * group.advantages)
    return float((term - group.kl_coeff * group.kl_per_response).mean())


def surrogate_value_and_grad(theta: np.ndarray, group: PolicyGroup) -> tuple[float, np.ndarray]:
    """Surrogate objective and its exact gradient at theta for a fixed group.

    The sampled responses, advantages, logp_old, and the reference policy are
    held fixed; only the current-policy log-probabilities and the KL penalty
    depend on theta. The clipped branch contributes zero gradient.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.isfinite(theta).all():
        raise NonFiniteLogProb("theta: contains non-finite values")
    m = group.reasoning_length
    G = len(group.rollouts)
    p_lex = _softmax(theta[0:2])
    logp = np.array(
        [sequence_logp(theta, c, m, a) for c, a in zip(group.word_counts, group.answer_indices)]
    )
    if not np.isfinite(group.logp_old).all():
        raise NonFiniteLogProb("logp_old: contains non-finite values")
    rho = np.exp(logp - group.logp_old)
    clipped = np.clip(rho, 1.0 - group.clip_eps, 1.0 + group.clip_eps)
    unclipped_term = rho * group.advantages
    clipped_term = clipped * group.advantages
    term = np.minimum(unclipped_term, clipped_term)
    active = unclipped_term <= clipped_term

    grad = np.zeros(THETA_DIM)
    p_ans = _softmax(theta[2:4])
    for i in range(G):
        if not active[i]:
            continue
        coeff = rho[i] * group.advantages[i]
        c_i = group.word_counts[i]
        grad[0] += coeff * (c_i - m * p_lex[0])
        grad[1] += coeff * ((m - c_i) - m * p_lex[1])
        onehot = np.array([1.0, 0.0]) if group.answer_indices[i] == 0 else np.array([0.0, 1.0])
        grad[2:4] += coeff * (onehot - p_ans)
    grad /= G

    kl_lex, g_lex = _categorical_kl(theta[0:2], group.theta_ref[0:2])
    kl_ans, g_ans = _categorical_kl(theta[2:4], group.theta_ref[2:4])
    kl_total = m * kl_lex + kl_ans
    grad[0:2] -= group.kl_coeff * m * g_lex
    grad[2:4] -= group.kl_coeff * g_ans
    value = float(term.mean() - group.kl_coeff * kl_total)
    return value, grad


# --- training loop -----------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.1
    group_size: int = 8
    seed: int = 0
    clip_eps: float = 0.2
    kl_coeff: float = 0.04
    inner_steps: int = 1
    init_theta: tuple[float, ...] = DEFAULT_THETA
    env: ToyEnvConfig = field(default_factory=ToyEnvConfig)


def train_toy(config: TrainConfig) -> list[dict]:
    """Gradient ascent on the clipped surrogate; returns one trace record per step.

    Scene labels alternate (even steps anomalous). The record for step t holds
    the group statistics gathered under the pre-update policy and the theta
    and objective value after the update. Step 0 is the initial point.
    """
    theta = np.asarray(config.init_theta, dtype=np.float64).copy()
    if theta.shape != (THETA_DIM,):
        raise ValueError(f"init_theta must have {THETA_DIM} entries, got {theta.shape}")
    theta_ref = theta.copy()
    trace = [
        {
            "step": 0,
            "scene_label": None,
            "mean_reward": None,
            "mean_r_cons": None,
            "mean_r_acc": None,
            "mean_r_fmt": None,
            "objective": None,
            "theta": theta.tolist(),
        }
    ]
    master = np.random.SeedSequence(config.seed)
    children = master.spawn(2 * config.steps) if config.steps > 0 else []
    for t in range(config.steps):
        label = 1 if t % 2 == 0 else 0
        scene = sample_scene(config.env, label, np.random.default_rng(children[2 * t]))
        group = sample_group(
            theta,
            scene,
            config.group_size,
            children[2 * t + 1],
            env=config.env,
            theta_ref=theta_ref,
            clip_eps=config.clip_eps,
            kl_coeff=config.kl_coeff,
        )
        for _ in range(config.inner_steps):
            _, grad = surrogate_value_and_grad(theta, group)
            theta = theta + config.lr * grad
        if not np.isfinite(theta).all():
            raise DivergedNonFinite(f"theta became non-finite at step {t + 1}: {theta}")
        objective, _ = surrogate_value_and_grad(theta, group)
        bundles = [r.bundle for r in group.rollouts]
        trace.append(
            {
                "step": t + 1,
                "scene_label": label,
                "mean_reward": float(group.rewards.mean()),
                "mean_r_cons": float(np.mean([b.r_cons for b in bundles])),
                "mean_r_acc": float(np.mean([b.r_acc for b in bundles])),
                "mean_r_fmt": float(np.mean([b.r_fmt for b in bundles])),
                "objective": float(objective),
                "theta": theta.tolist(),
            }
        )
    return trace


def evaluate_policy(
    theta: np.ndarray,
    env: ToyEnvConfig,
    n_rollouts: int,
    seed: int,
    label: int,
) -> dict[str, float]:
    """Monte-Carlo estimate of reward components on fresh scenes of one class."""
    ss = np.random.SeedSequence(seed)
    totals = {"r_fmt": 0.0, "r_acc": 0.0, "r_cons": 0.0, "total": 0.0}
    for child in ss.spawn(n_rollouts):
        rng = np.random.default_rng(child)
        scene = sample_scene(env, label, rng)
        rollout = run_rollout(np.asarray(theta, dtype=np.float64), scene, env, rng)
        totals["r_fmt"] += rollout.bundle.r_fmt
        totals["r_acc"] += rollout.bundle.r_acc
        totals["r_cons"] += rollout.bundle.r_cons
        totals["total"] += rollout.bundle.total
    return {k: v / n_rollouts for k, v in totals.items()}

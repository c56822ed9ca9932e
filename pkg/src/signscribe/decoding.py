"""Inference-time search.

Gloss decoding works on frame-level log-probabilities: a greedy best-path
collapse and a prefix beam search over collapsed label sequences. Sentence
decoding drives the autoregressive decoder: greedy one-token-at-a-time and
beam search with the ((5+u)/6)^alpha length penalty.

Sentence decoders talk to the model through a small pathway protocol rather
than raw stacks: any object with

    prefix_logits(z, src_pad_mask, prefix) -> ndarray[|W|]
    prefix_logits_batch(z_batch, mask_batch, indices, prefixes) -> ndarray[len(indices), |W|]

where prefix is the generated-so-far token tuple (without the leading
start-of-sentence token, which the pathway adds itself) and the batched form
scores one growing prefix per still-active batch row. This keeps search
logic independent of embedding details and lets tests drive it with
hand-built tables.

Every decoder is deterministic: score ties break toward the lexicographically
smallest token sequence, which for single-step choices means the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

BLANK = 0
DEFAULT_EOS = 2


@dataclass(frozen=True)
class Hypothesis:
    """One decoded candidate sentence with its raw (unpenalized) score."""

    tokens: tuple[int, ...]
    log_prob: float
    finished: bool

    def __post_init__(self):
        if self.log_prob > 1e-9:
            raise ContractError(f"hypothesis log-probability {self.log_prob} > 0")

    def words(self, eos_id: int = DEFAULT_EOS) -> tuple[int, ...]:
        """Tokens with the closing end-of-sentence marker stripped."""
        if self.tokens and self.tokens[-1] == eos_id:
            return self.tokens[:-1]
        return self.tokens


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 0
    alpha: float = 0.0
    max_len: int = 60

    def __post_init__(self):
        if self.beam_width < 0:
            raise ConfigError(f"beam width must be >= 0, got {self.beam_width}")
        if not 0.0 <= self.alpha <= 2.0:
            raise ConfigError(f"length-penalty exponent must lie in [0, 2], got {self.alpha}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")


def length_penalty(n_tokens: int, alpha: float) -> float:
    """lp(u) = ((5 + u) / 6)^alpha; identity at alpha = 0."""
    return float(((5.0 + n_tokens) / 6.0) ** alpha)


# ---------------------------------------------------------------------------
# CTC gloss decoding
# ---------------------------------------------------------------------------


def collapse_path(path, blank: int = BLANK) -> tuple[int, ...]:
    """Squash consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev and sym != blank:
            out.append(int(sym))
        prev = sym
    return tuple(out)


def ctc_greedy(log_probs) -> tuple[int, ...]:
    """Collapse the per-frame argmax path."""
    lp = log_probs.data if hasattr(log_probs, "data") else np.asarray(log_probs)
    return collapse_path(np.argmax(lp, axis=1))


def _log_add(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def ctc_beam_search(log_probs, width: int) -> tuple[int, ...]:
    """Prefix beam search over collapsed gloss sequences.

    Each live prefix carries two scores: probability mass of paths ending in
    a blank and mass ending in the prefix's last symbol. Extending by a
    repeated symbol is only legal from the blank side, which is exactly the
    collapse rule.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    lp = log_probs.data if hasattr(log_probs, "data") else np.asarray(log_probs)
    n_frames, k = lp.shape
    ninf = -np.inf
    # prefix -> (log mass ending in blank, log mass ending in last symbol)
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, ninf)}
    for t in range(n_frames):
        grown: dict[tuple[int, ...], list[float]] = {}

        def bucket(prefix):
            return grown.setdefault(prefix, [ninf, ninf])

        for prefix, (pb, pnb) in beams.items():
            total = _log_add(pb, pnb)
            slot = bucket(prefix)
            slot[0] = _log_add(slot[0], total + lp[t, BLANK])
            if prefix:
                # same symbol again without an intervening blank: still one symbol
                slot[1] = _log_add(slot[1], pnb + lp[t, prefix[-1]])
            for c in range(1, k):
                ext = bucket(prefix + (c,))
                if prefix and c == prefix[-1]:
                    contrib = pb + lp[t, c]  # repeat requires the blank side
                else:
                    contrib = total + lp[t, c]
                ext[1] = _log_add(ext[1], contrib)
        ranked = sorted(
            grown.items(), key=lambda item: (-_log_add(item[1][0], item[1][1]), item[0])
        )
        beams = {prefix: (pb, pnb) for prefix, (pb, pnb) in ranked[:width]}
    best = min(beams.items(), key=lambda item: (-_log_add(item[1][0], item[1][1]), item[0]))
    return best[0]


# ---------------------------------------------------------------------------
# Autoregressive sentence decoding
# ---------------------------------------------------------------------------


def _masked_log_softmax(logits: np.ndarray, forbid) -> np.ndarray:
    shifted = logits - logits.max()
    logq = shifted - np.log(np.exp(shifted).sum())
    if forbid:
        logq = logq.copy()
        logq[list(forbid)] = -np.inf
    return logq


def ar_greedy(z, src_pad_mask, decoder, max_len: int, *,
              eos_id: int = DEFAULT_EOS, forbid=()) -> Hypothesis:
    """Greedy rollout: extend by the argmax token until <eos> or the cap.

    The score is the sum of chosen-token log-probabilities under the model's
    full softmax; forbidden ids are only excluded from selection, so scores
    stay comparable across decoders.
    """
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    tokens: tuple[int, ...] = ()
    log_prob = 0.0
    for _ in range(max_len):
        logq = _masked_log_softmax(
            np.asarray(decoder.prefix_logits(z, src_pad_mask, tokens), dtype=np.float64),
            forbid,
        )
        choice = int(np.argmax(logq))
        tokens += (choice,)
        log_prob += float(logq[choice])
        if choice == eos_id:
            return Hypothesis(tokens, log_prob, True)
    return Hypothesis(tokens, log_prob, False)


def ar_greedy_batch(z_batch, mask_batch, decoder, max_len, *,
                    eos_id: int = DEFAULT_EOS, forbid=()) -> list[Hypothesis]:
    """Greedy decode many sources in lockstep; one batched forward per step.

    max_len may be a single cap or one per source; per-sample results are
    identical to sequential ar_greedy calls with the same caps, so the
    grouping into batches never affects the output.
    """
    n = len(z_batch) if isinstance(z_batch, (list, tuple)) else z_batch.shape[0]
    caps = [int(max_len)] * n if np.ndim(max_len) == 0 else [int(c) for c in max_len]
    if len(caps) != n:
        raise ConfigError(f"got {len(caps)} length caps for {n} sources")
    if any(c < 1 for c in caps):
        raise ConfigError(f"max_len must be >= 1, got {min(caps)}")
    states: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)] * n
    active = list(range(n))
    for _ in range(max(caps)):
        if not active:
            break
        prefixes = [states[i][0] for i in active]
        logits = np.asarray(
            decoder.prefix_logits_batch(z_batch, mask_batch, active, prefixes),
            dtype=np.float64,
        )
        still = []
        for row, i in enumerate(active):
            logq = _masked_log_softmax(logits[row], forbid)
            choice = int(np.argmax(logq))
            tokens, lp, _ = states[i]
            tokens += (choice,)
            lp += float(logq[choice])
            done = choice == eos_id
            states[i] = (tokens, lp, done)
            if not done and len(tokens) < caps[i]:
                still.append(i)
        active = still
    return [Hypothesis(tokens, lp, done) for tokens, lp, done in states]


def ar_beam_search(z, src_pad_mask, decoder, cfg: DecodeConfig, *,
                   eos_id: int = DEFAULT_EOS, forbid=()) -> Hypothesis:
    """Beam search ranked by log_prob / lp(len); width 0 falls back to greedy.

    The greedy rollout always joins the final candidate pool, so at alpha = 0
    the returned raw score can never fall below greedy's. Pruning during the
    search uses raw log-probability; the length penalty applies to the final
    ranking, finished or not.
    """
    greedy = ar_greedy(z, src_pad_mask, decoder, cfg.max_len,
                       eos_id=eos_id, forbid=forbid)
    if cfg.beam_width == 0:
        return greedy

    beams: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
    for _ in range(cfg.max_len):
        candidates: list[tuple[tuple[int, ...], float, bool]] = []
        expanded = False
        for tokens, lp, finished in beams:
            if finished:
                candidates.append((tokens, lp, True))
                continue
            expanded = True
            logq = _masked_log_softmax(
                np.asarray(decoder.prefix_logits(z, src_pad_mask, tokens), dtype=np.float64),
                forbid,
            )
            for w in np.flatnonzero(np.isfinite(logq)):
                w = int(w)
                candidates.append((tokens + (w,), lp + float(logq[w]), w == eos_id))
        if not expanded:
            break
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[: cfg.beam_width]

    pool = [Hypothesis(t, lp, f) for t, lp, f in beams] + [greedy]
    finished = [h for h in pool if h.finished]
    ranked = finished if finished else pool
    return min(
        ranked,
        key=lambda h: (-h.log_prob / length_penalty(len(h.tokens), cfg.alpha), h.tokens),
    )

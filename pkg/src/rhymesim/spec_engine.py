"""Per-response speculative decoding driver.

Speculation never changes what a response says, only how many engine
iterations it takes to say it: drafts come from the prompt's history tree,
verification is an exact prefix comparison against the replayed ground-truth
continuation, and every verify pass also yields the one token a normal decode
step would have produced. The speculation window grows additively on full
acceptance and collapses to its initial size on any rejection; the lookup
prefix shrinks while matches fail and snaps back once one succeeds. A batch
gate disables speculation outright when the worker's batch is already large
enough that verification overhead would not pay off at the observed
acceptance rate.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace

from .history import SuffixTree

WINDOW_INIT = 2
WINDOW_ADD = 2
WINDOW_MAX = 32
PREFIX_INIT = 7
PREFIX_MIN = 3
GATE_BUCKETS = 10
GATE_DEFAULT_MAX_BATCH = 8192


class ResponseComplete(RuntimeError):
    """step() was called on a response that already reached its full length."""


@dataclass(frozen=True)
class AimdWindow:
    """Additive-increase, reset-on-reject speculation window."""

    size: int = WINDOW_INIT
    init: int = WINDOW_INIT
    add_step: int = WINDOW_ADD
    max: int = WINDOW_MAX

    def __post_init__(self):
        if not (1 <= self.init <= self.size <= self.max):
            raise ValueError(f"window invariant violated: {self}")


def next_window(window: AimdWindow, all_accepted: bool) -> AimdWindow:
    """Grow by `add_step` on a fully accepted draft, else reset to `init`."""
    if all_accepted:
        return replace(window, size=min(window.size + window.add_step, window.max))
    return replace(window, size=window.init)


@dataclass(frozen=True)
class PrefixPolicy:
    """Lookup prefix length: decays on misses, restores on a hit."""

    current_len: int = PREFIX_INIT
    initial_len: int = PREFIX_INIT
    min_len: int = PREFIX_MIN

    def __post_init__(self):
        if not (1 <= self.min_len <= self.current_len <= self.initial_len):
            raise ValueError(f"prefix invariant violated: {self}")


def choose_prefix(policy: PrefixPolicy, found_match: bool) -> PrefixPolicy:
    if found_match:
        return replace(policy, current_len=policy.initial_len)
    return replace(policy, current_len=max(policy.current_len - 1, policy.min_len))


@dataclass(frozen=True)
class BatchGate:
    """Max viable batch size per acceptance-rate decile.

    `table[i]` caps the batch for acceptance rates in [i/10, (i+1)/10); rates
    of exactly 1.0 fall into the top bucket. Lower acceptance must never allow
    a larger batch than higher acceptance.
    """

    table: tuple[int, ...] = (GATE_DEFAULT_MAX_BATCH,) * GATE_BUCKETS

    def __post_init__(self):
        if len(self.table) != GATE_BUCKETS:
            raise ValueError(f"gate table needs {GATE_BUCKETS} buckets, got {len(self.table)}")
        if any(a > b for a, b in zip(self.table, self.table[1:])):
            raise ValueError("gate table must be non-decreasing in acceptance bucket")


def gate_check(gate: BatchGate, current_batch: int, recent_acceptance: float) -> bool:
    """True when speculation stays enabled for this batch size."""
    bucket = min(int(recent_acceptance * GATE_BUCKETS), GATE_BUCKETS - 1)
    bucket = max(bucket, 0)
    return current_batch <= gate.table[bucket]


def verify(draft: list[int], truth: list[int]) -> int:
    """Accepted token count: the longest common prefix of draft and truth."""
    n = 0
    for d, t in zip(draft, truth):
        if d != t:
            break
        n += 1
    return n


class SpecStats:
    """Shared counters; increments are lock-protected for concurrent steppers."""

    __slots__ = ("_lock", "tokens_total", "tokens_speculated", "tokens_accepted",
                 "verify_passes", "decode_passes")

    def __init__(self):
        self._lock = threading.Lock()
        self.tokens_total = 0
        self.tokens_speculated = 0
        self.tokens_accepted = 0
        self.verify_passes = 0
        self.decode_passes = 0

    def record(self, *, total: int, speculated: int, accepted: int,
               verify_pass: bool) -> None:
        with self._lock:
            self.tokens_total += total
            self.tokens_speculated += speculated
            self.tokens_accepted += accepted
            if verify_pass:
                self.verify_passes += 1
            else:
                self.decode_passes += 1

    @property
    def speculation_rate(self) -> float:
        return self.tokens_accepted / self.tokens_total if self.tokens_total else 0.0

    @property
    def acceptance_rate(self) -> float:
        return self.tokens_accepted / self.tokens_speculated if self.tokens_speculated else 0.0

    def csv_row(self, step: int) -> list:
        return [step, f"{self.speculation_rate:.6f}", f"{self.acceptance_rate:.6f}",
                self.verify_passes, self.decode_passes]

    CSV_HEADER = ["step", "speculation_rate", "acceptance_rate", "verify_passes", "decode_passes"]


@dataclass
class SpecConfig:
    """Engine knobs; mirrored one-to-one by the `spec.*` config keys."""

    enabled: bool = True
    window_init: int = WINDOW_INIT
    window_add: int = WINDOW_ADD
    window_max: int = WINDOW_MAX
    prefix_init: int = PREFIX_INIT
    prefix_min: int = PREFIX_MIN
    gate_table: tuple[int, ...] = (GATE_DEFAULT_MAX_BATCH,) * GATE_BUCKETS

    def new_window(self) -> AimdWindow:
        return AimdWindow(size=self.window_init, init=self.window_init,
                          add_step=self.window_add, max=self.window_max)

    def new_prefix(self) -> PrefixPolicy:
        return PrefixPolicy(current_len=self.prefix_init,
                            initial_len=self.prefix_init, min_len=self.prefix_min)

    def gate(self) -> BatchGate:
        return BatchGate(tuple(self.gate_table))


@dataclass
class ResponseContext:
    """Mutable replay state for one response being generated."""

    truth: list[int]
    tree: SuffixTree | None
    window: AimdWindow
    prefix: PrefixPolicy
    stats: SpecStats
    speculate: bool = True
    generated: list[int] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return len(self.generated) >= len(self.truth)


@dataclass
class StepOutcome:
    tokens_appended: int
    drafted: int
    accepted: int
    used_speculation: bool
    done: bool


def step_response(ctx: ResponseContext) -> StepOutcome:
    """Advance one engine iteration: either a plain decode of one token or a
    draft+verify pass that lands the accepted run plus its bonus token."""
    if ctx.done:
        raise ResponseComplete(f"response already complete at {len(ctx.truth)} tokens")

    pos = len(ctx.generated)
    draft: list[int] = []
    looked_up = False
    found = False
    if ctx.speculate and ctx.tree is not None and pos >= ctx.prefix.current_len:
        looked_up = True
        prefix = ctx.generated[pos - ctx.prefix.current_len :]
        result = ctx.tree.extract_draft(prefix, ctx.window.size)
        found = result.found
        draft = result.tokens

    if not draft:
        # Plain decode: no draft to verify (no tree, short history, miss, or
        # a match that ends exactly at a response boundary).
        ctx.generated.append(ctx.truth[pos])
        ctx.stats.record(total=1, speculated=0, accepted=0, verify_pass=False)
        if looked_up:
            ctx.prefix = choose_prefix(ctx.prefix, found)
        return StepOutcome(1, 0, 0, False, ctx.done)

    truth_rest = ctx.truth[pos:]
    accepted = verify(draft, truth_rest)
    all_accepted = accepted == len(draft)
    appended = min(accepted, len(truth_rest))
    ctx.generated.extend(truth_rest[:appended])
    bonus = 0
    if not ctx.done:
        # The verify forward pass itself emits the next token.
        ctx.generated.append(ctx.truth[pos + appended])
        bonus = 1
    ctx.stats.record(total=appended + bonus, speculated=len(draft),
                     accepted=appended, verify_pass=True)
    ctx.window = next_window(ctx.window, all_accepted)
    ctx.prefix = choose_prefix(ctx.prefix, True)
    return StepOutcome(appended + bonus, len(draft), appended, True, ctx.done)


@dataclass
class ResponseReplay:
    """Full replay of one response: tokens landed per engine iteration."""

    tokens_per_iter: list[int]
    drafted: int
    accepted: int

    @property
    def iterations(self) -> int:
        return len(self.tokens_per_iter)

    @property
    def total_tokens(self) -> int:
        return sum(self.tokens_per_iter)


def replay_response(truth: list[int], tree: SuffixTree | None, config: SpecConfig,
                    stats: SpecStats | None = None, speculate: bool = True) -> ResponseReplay:
    """Run a response to completion and report its iteration profile."""
    stats = stats if stats is not None else SpecStats()
    ctx = ResponseContext(
        truth=list(truth),
        tree=tree if (speculate and config.enabled) else None,
        window=config.new_window(),
        prefix=config.new_prefix(),
        stats=stats,
        speculate=speculate and config.enabled,
    )
    per_iter: list[int] = []
    drafted = accepted = 0
    while not ctx.done:
        outcome = step_response(ctx)
        per_iter.append(outcome.tokens_appended)
        drafted += outcome.drafted
        accepted += outcome.accepted
    return ResponseReplay(per_iter, drafted, accepted)

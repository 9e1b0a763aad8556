from __future__ import annotations

import itertools
import random

import pytest

import oracles
from rhymesim.history import Response, build_tree
from rhymesim.spec_engine import (
    AimdWindow,
    BatchGate,
    PrefixPolicy,
    ResponseComplete,
    ResponseContext,
    SpecConfig,
    SpecStats,
    choose_prefix,
    gate_check,
    next_window,
    replay_response,
    step_response,
    verify,
)


class TestAimdWindow:
    def test_additive_increase_by_two(self):
        assert next_window(AimdWindow(size=2), True).size == 4

    def test_caps_at_upper_threshold(self):
        assert next_window(AimdWindow(size=30), True).size == 32
        assert next_window(AimdWindow(size=32), True).size == 32

    def test_any_rejection_resets_to_init(self):
        assert next_window(AimdWindow(size=24), False).size == 2

    def test_closed_form_over_all_short_histories(self):
        # Window state after any accept/reject history equals
        # min(init + add_step * trailing_accept_streak, max).
        for length in range(0, 13):
            for history in itertools.product([False, True], repeat=length):
                w = AimdWindow()
                for accepted in history:
                    w = next_window(w, accepted)
                assert w.size == oracles.window_after(list(history))

    def test_custom_init_is_reset_target(self):
        w = AimdWindow(size=10, init=4, add_step=3, max=12)
        assert next_window(w, False).size == 4
        assert next_window(w, True).size == 12

    def test_invalid_window_rejected(self):
        with pytest.raises(ValueError):
            AimdWindow(size=64)


class TestPrefixPolicy:
    def test_no_match_shrinks(self):
        assert choose_prefix(PrefixPolicy(current_len=7), False).current_len == 6

    def test_floor_at_min(self):
        assert choose_prefix(PrefixPolicy(current_len=3), False).current_len == 3

    def test_match_resets_to_initial(self):
        assert choose_prefix(PrefixPolicy(current_len=5), True).current_len == 7


class TestVerify:
    def test_partial_accept(self):
        assert verify([5, 6, 7], [5, 6, 9, 1]) == 2

    def test_full_accept(self):
        truth = [1, 2, 3, 4, 5, 6, 7, 8]
        assert verify(list(truth), truth) == 8

    def test_empty_draft(self):
        assert verify([], [1, 2]) == 0

    def test_draft_longer_than_truth(self):
        assert verify([1, 2, 3], [1, 2]) == 2


class TestBatchGate:
    def test_batch_one_always_speculates(self):
        gate = BatchGate()
        for acc in (0.0, 0.35, 0.99, 1.0):
            assert gate_check(gate, 1, acc)

    def test_batch_above_bucket_limit_disables(self):
        table = tuple([64] * 5 + [1024] * 5)
        gate = BatchGate(table)
        assert not gate_check(gate, 65, 0.2)
        assert gate_check(gate, 65, 0.8)

    def test_profile_table_fixture(self):
        # Buckets for [0.6, 0.8) allow 4096 concurrent rollouts.
        table = tuple([256] * 6 + [4096] * 2 + [8192] * 2)
        gate = BatchGate(table)
        assert gate_check(gate, 2176, 0.7)
        assert not gate_check(gate, 4097, 0.7)

    def test_non_monotone_table_rejected(self):
        with pytest.raises(ValueError):
            BatchGate(tuple([100] * 5 + [50] * 5))


def make_ctx(truth, corpus=None, config=None):
    config = config or SpecConfig()
    tree = None
    if corpus is not None:
        tree = build_tree("p", 1, [Response("p", 1, t, r) for t, r in corpus])
    return ResponseContext(
        truth=list(truth),
        tree=tree,
        window=config.new_window(),
        prefix=config.new_prefix(),
        stats=SpecStats(),
    )


class TestStepResponse:
    def test_no_history_falls_back_to_decode(self):
        ctx = make_ctx([4, 5, 6])
        out = step_response(ctx)
        assert out.tokens_appended == 1
        assert not out.used_speculation
        assert ctx.stats.decode_passes == 1

    def test_full_accept_appends_window_plus_bonus(self):
        truth = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10]
        corpus = [(list(truth), 1.0)]
        config = SpecConfig(prefix_init=3, prefix_min=3)
        ctx = make_ctx(truth, corpus, config)
        for _ in range(3):  # warm-up decodes until the prefix exists
            step_response(ctx)
        out = step_response(ctx)
        assert out.used_speculation
        assert out.accepted == 2
        assert out.tokens_appended == 3  # 2 accepted + 1 bonus
        assert ctx.window.size == 4

    def test_complete_response_raises(self):
        ctx = make_ctx([1])
        step_response(ctx)
        with pytest.raises(ResponseComplete):
            step_response(ctx)

    def test_output_equals_truth_regardless_of_drafts(self):
        rng = random.Random(5)
        for _ in range(30):
            truth = [rng.randrange(6) for _ in range(rng.randint(1, 120))]
            # History that may or may not resemble the truth at all.
            corpus = [
                ([rng.randrange(6) for _ in range(rng.randint(1, 120))], 1.0)
                for _ in range(3)
            ]
            if rng.random() < 0.5:
                corpus.append((list(truth), 0.5))
            ctx = make_ctx(truth, corpus)
            iters = 0
            while not ctx.done:
                step_response(ctx)
                iters += 1
            assert ctx.generated == truth
            assert ctx.stats.tokens_total == len(truth)
            assert ctx.stats.verify_passes + ctx.stats.decode_passes == iters

    def test_prefix_policy_shrinks_on_miss_and_resets_on_hit(self):
        truth = list(range(30))
        corpus = [(list(range(100, 130)), 1.0)]  # shares nothing with truth
        config = SpecConfig(prefix_init=5, prefix_min=3)
        ctx = make_ctx(truth, corpus, config)
        for _ in range(5):
            step_response(ctx)
        # First lookup happened at pos 5 and missed.
        step_response(ctx)
        assert ctx.prefix.current_len == 4

    def test_identical_history_reaches_full_acceptance(self):
        truth = list(range(400))
        corpus = [(list(truth), 1.0)]
        replay = replay_response(truth, build_tree("p", 1, [Response("p", 1, *c) for c in [(corpus[0][0], 1.0)]]), SpecConfig())
        assert replay.total_tokens == len(truth)
        # After warm-up everything lands through accepted drafts.
        stats_accept = replay.accepted / (len(truth) - 7)
        assert stats_accept > 0.95
        assert replay.iterations < len(truth) / 4


class TestReplayResponse:
    def test_disabled_speculation_is_one_token_per_iter(self):
        truth = list(range(50))
        replay = replay_response(truth, None, SpecConfig(enabled=False))
        assert replay.iterations == 50
        assert replay.tokens_per_iter == [1] * 50

    def test_stats_accounting(self):
        truth = list(range(200))
        stats = SpecStats()
        tree = build_tree("p", 1, [Response("p", 1, list(truth), 1.0)])
        replay = replay_response(truth, tree, SpecConfig(), stats=stats)
        assert stats.tokens_total == 200
        assert stats.tokens_accepted <= stats.tokens_speculated
        assert 0.0 <= stats.speculation_rate <= 1.0
        assert stats.verify_passes + stats.decode_passes == replay.iterations

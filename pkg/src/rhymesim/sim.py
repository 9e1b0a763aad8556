"""Deterministic discrete-event simulation of the rollout/reward/train pipeline.

One simulated step replays one trace epoch: every response's content and
iteration profile come from the speculation engine replay, and the event loop
only decides *when* things happen. Time advances fluidly: a worker's in-flight
responses all progress together at `1 / t_iter(batch)` iterations per second,
so completions, migrations, and weight waits fall out of plain arithmetic and
two runs with the same inputs produce byte-identical event logs.

Weight versions are named by the step they become current for. Pipelined
policies overlap: the job that trains step k's samples runs while step k+1
rolls out and publishes the version used by step k+2, which is the one-step
off-policy contract (every response rolls out under version step-1). The
colocated baseline instead serializes rollout, a context switch, and training
on the same workers each step, publishing version k for step k+1. Training
starts once a batch-size worth of the step's samples has been rewarded;
oversampling lowers that threshold and late samples count toward the next
step's batch.

Inter-step migrated rollouts keep their generated tokens, pay a prefill
recompute charge when they resume, finish under the next step's version, and
count toward the next step's batch.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

from .history import HistoryStore, Response
from .scheduler import (
    AllocationPlan,
    MigrationPolicy,
    PromptStat,
    RankingGroup,
    assignment_order,
    beta_from_history,
    build_groups,
    migration_decision,
    partition_sizes,
    plan_allocation,
)
from .spec_engine import SpecConfig, SpecStats, gate_check, replay_response
from .tracegen import Trace

POLICIES = ("colocated", "streaming", "histopipe_naive", "histopipe_two_tier")
EVENTS_SCHEMA_VERSION = 1
RUN_SCHEMA_VERSION = 1

_EPS = 1e-9


class InfeasiblePlanError(RuntimeError):
    """Two-tier planning could not fit the worker budget."""


class _GroupProfileModel:
    """Execution-time estimates pre-profiled from each group's history.

    For tau(l, k) the group is resolved by its representative length and its
    last-epoch member lengths are dealt across k workers exactly the way the
    simulator will deal next epoch's responses; the returned time is the
    slowest worker's decayed-batch makespan. This is the simulator's analog
    of profiling the inference engine, and it knows nothing about the epoch
    being planned.
    """

    def __init__(self, member_lens_by_rep: dict[float, list[int]], cost: "CostConfig",
                 accepted_per_pass: float):
        self._groups = member_lens_by_rep
        self._reps = sorted(member_lens_by_rep)
        self._cost = cost
        self._app = accepted_per_pass

    def _resolve(self, length: float) -> list[int]:
        if length in self._groups:
            return self._groups[length]
        nearest = min(self._reps, key=lambda r: abs(r - length))
        return self._groups[nearest]

    def _share_makespan(self, lens: list[int]) -> float:
        # All responses in a share iterate together; the batch shrinks as the
        # shorter ones finish.
        total = 0.0
        batch = len(lens)
        prev = 0
        for length in sorted(lens):
            total += (length - prev) * self._cost.t_iter(batch)
            batch -= 1
            prev = length
        return total

    def tau(self, length: float, workers: int) -> float:
        member_lens = self._resolve(length)
        shares: list[list[int]] = [[] for _ in range(workers)]
        for i, l in enumerate(member_lens):
            shares[i % workers].append(l)
        worst = max(self._share_makespan(s) for s in shares)
        return worst / (1.0 + self._app) + self._cost.fixed_step_overhead


@dataclass
class Policy:
    name: str
    speculation: bool = False
    migration: bool = True
    oversample_pct: float = 0.0
    plan_precision: float = 0.05

    def __post_init__(self):
        if self.name not in POLICIES:
            raise ValueError(f"unknown policy {self.name!r}; expected one of {POLICIES}")
        if not (0.0 <= self.oversample_pct < 100.0):
            raise ValueError("oversample_pct must be in [0, 100)")

    @property
    def is_histopipe(self) -> bool:
        return self.name.startswith("histopipe")


@dataclass
class CostConfig:
    """All durations in abstract seconds; the one source of time truth."""

    per_iter_base: float = 0.02      # engine iteration floor
    per_iter_batch: float = 0.0003   # added per in-flight response on the worker
    fixed_step_overhead: float = 0.0
    prefill_per_token: float = 0.00005  # KV recompute charge on migration
    reward_time: float = 0.01        # per sample on a reward worker
    train_base: float = 0.5
    train_per_sample: float = 0.005
    context_switch_frac: float = 0.05  # colocated only, fraction of train time

    def t_iter(self, batch: int) -> float:
        return self.per_iter_base + self.per_iter_batch * batch

    def t_train(self, samples: int) -> float:
        return self.train_base + self.train_per_sample * samples


@dataclass
class ClusterSpec:
    rollout_workers: int
    reward_workers: int = 2
    n_groups: int = 4
    weight_propagation_delay: float = 0.1
    min_wks: int = 1
    max_wks: int | None = None

    def __post_init__(self):
        if self.rollout_workers < 1 or self.reward_workers < 1:
            raise ValueError("need at least one rollout and one reward worker")
        if self.rollout_workers < self.n_groups * self.min_wks:
            raise ValueError("rollout_workers must cover n_groups * min_wks")


@dataclass
class SimEvent:
    time: float
    seq: int
    kind: str
    payload: dict

    def as_dict(self) -> dict:
        return {"time": self.time, "seq": self.seq, "kind": self.kind, **self.payload}


@dataclass
class MetricsReport:
    samples_per_second: float
    makespan: float
    samples: int
    steps: int
    bubble_fraction: float
    bubble_per_worker: list[float]
    stage_shares: dict[str, float]      # of rollout-worker time; sums to 1
    stage_durations: dict[str, float]   # wall time with >=1 task of the stage live
    migration_pct: float
    speculation_rate: float
    acceptance_rate: float

    def as_dict(self) -> dict:
        return {
            "samples_per_second": self.samples_per_second,
            "makespan": self.makespan,
            "samples": self.samples,
            "steps": self.steps,
            "bubble_fraction": self.bubble_fraction,
            "bubble_per_worker": list(self.bubble_per_worker),
            "stage_shares": dict(self.stage_shares),
            "stage_durations": dict(self.stage_durations),
            "migration_pct": self.migration_pct,
            "speculation_rate": self.speculation_rate,
            "acceptance_rate": self.acceptance_rate,
        }


@dataclass
class SimResult:
    metrics: MetricsReport
    events: list[SimEvent]
    timeline: list[tuple[int, float, float, str]]  # worker, start, end, activity
    accounting: dict
    spec_stats_rows: list = field(default_factory=list)

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e.as_dict(), sort_keys=True) + "\n" for e in self.events)


@dataclass
class _Task:
    sid: str
    prompt: str
    epoch: int
    member: int
    tokens_len: int
    total_iters: int
    profile: list[int] | None  # cumulative tokens per iteration; None = 1/iter
    group: int | None
    weight_version: int
    remaining: float = 0.0
    prefill_left: float = 0.0
    worker: int | None = None
    migrated: bool = False
    continuation_version: int | None = None

    def generated_len(self) -> int:
        done = self.total_iters - self.remaining
        idx = min(self.total_iters, max(0, math.floor(done + _EPS)))
        if idx <= 0:
            return 0
        if self.profile is None:
            return idx
        return self.profile[idx - 1]


@dataclass
class _Worker:
    wid: int
    free_at: float = 0.0
    step: int = 0
    inflight: dict = field(default_factory=dict)
    last_advance: float = 0.0
    sched_version: int = 0
    busy_since: tuple[float, str] | None = None
    intervals: list = field(default_factory=list)

    def begin(self, kind: str, start: float) -> None:
        if self.busy_since is None:
            self.busy_since = (start, kind)

    def finish(self, end: float) -> None:
        if self.busy_since is not None:
            start, kind = self.busy_since
            if end > start:
                self.intervals.append((start, end, kind))
            self.busy_since = None


@dataclass
class _StepPlan:
    step: int
    groups: list[RankingGroup] | None            # None for non-grouped steps
    worker_groups: dict[int, int]                # worker -> group index
    shares: dict[int, list[_Task]]               # worker -> tasks
    group_total: dict[int, int]
    group_completed: dict[int, int]
    policy_kind: str
    allocation: AllocationPlan | None = None


class _Simulation:
    def __init__(self, trace: Trace, cluster: ClusterSpec, policy: Policy,
                 cost: CostConfig, spec_config: SpecConfig, seed: int):
        self.trace = trace
        self.cluster = cluster
        self.policy = policy
        self.cost = cost
        self.spec_config = spec_config
        self.seed = seed
        self.steps = len(trace.epochs)
        if trace.epochs != list(range(1, self.steps + 1)):
            raise ValueError("trace epochs must be contiguous starting at 1")
        if policy.is_histopipe and self.steps < 2:
            raise ValueError("histopipe policies need a trace with at least 2 epochs")

        self.workers = [_Worker(w) for w in range(cluster.rollout_workers)]
        self.events: list[SimEvent] = []
        self._heap: list[tuple[float, int, str, tuple]] = []
        self._seq = 0
        self.now = 0.0

        self.store = HistoryStore(workers=1) if (policy.speculation and spec_config.enabled) else None
        self.stats = SpecStats()
        self.gate = spec_config.gate()
        self.spec_stats_rows: list[list] = []

        self.plans: dict[int, _StepPlan] = {}
        self.carry_in: dict[int, list[_Task]] = {}   # step -> inter-migrated tasks
        self.reward_free = [(0.0, i) for i in range(cluster.reward_workers)]
        heapq.heapify(self.reward_free)
        self.train_free = 0.0
        self.train_started: set[int] = set()
        self.train_done_time: dict[int, float] = {}
        self.last_train_duration = 0.0
        self.weight_avail: dict[int, float] = {}
        self.weight_waiters: dict[int, list[tuple[int, int]]] = {}  # version -> (wid, step)
        self.rewarded: dict[int, int] = {}
        self.expected: dict[int, int] = {}
        self._beta_cache: dict[int, float] = {}

        self.completed_ids: dict[str, int] = {}      # sid -> completion step
        self.scheduled_ids: dict[str, int] = {}
        self.migrations = 0
        self.inter_migrations = 0
        self.total_samples = 0

        self.reward_spans: list[tuple[float, float]] = []
        self.train_spans: list[tuple[float, float]] = []

    # -- event plumbing -----------------------------------------------------

    def _push(self, time: float, kind: str, data: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time, self._seq, kind, data))

    def _emit(self, kind: str, payload: dict) -> None:
        self._seq += 1
        self.events.append(SimEvent(self.now, self._seq, kind, payload))

    # -- planning -------------------------------------------------------------

    def _prompt_stats(self, epoch: int) -> dict[str, PromptStat]:
        stats = {}
        for pid, group in self.trace.epoch_responses(epoch).items():
            lens = sorted(r.generated_len for r in group)
            mid = len(lens) // 2
            median = float(lens[mid]) if len(lens) % 2 else (lens[mid - 1] + lens[mid]) / 2.0
            stats[pid] = PromptStat(median, float(lens[-1]))
        return stats

    def _make_tasks(self, step: int, shares_raw: dict[int, list]) -> dict[int, list[_Task]]:
        """Replay every assigned response and wrap it as a schedulable task."""
        flags: dict[int, bool] = {}
        for wid, members in shares_raw.items():
            flags[wid] = (
                self.policy.speculation
                and step >= 2
                and gate_check(self.gate, len(members), self.stats.acceptance_rate)
            )
        shares: dict[int, list[_Task]] = {}
        for wid in sorted(shares_raw):
            share = []
            for member, resp, group_idx in shares_raw[wid]:
                sid = f"{resp.prompt_id}/e{resp.epoch}/{member}"
                tree = self.store.get_tree(resp.prompt_id) if self.store is not None else None
                speculate = flags[wid]
                replay = replay_response(resp.tokens, tree if speculate else None,
                                         self.spec_config, stats=self.stats,
                                         speculate=speculate)
                profile = None
                if speculate and replay.iterations != replay.total_tokens:
                    acc = 0
                    profile = []
                    for t in replay.tokens_per_iter:
                        acc += t
                        profile.append(acc)
                share.append(_Task(
                    sid=sid, prompt=resp.prompt_id, epoch=resp.epoch, member=member,
                    tokens_len=resp.generated_len, total_iters=replay.iterations,
                    profile=profile, group=group_idx, weight_version=step - 1,
                    remaining=float(replay.iterations), worker=wid,
                ))
            shares[wid] = share
        return shares

    def _ensure_plan(self, step: int) -> _StepPlan:
        if step in self.plans:
            return self.plans[step]
        if step > 1:
            self._ensure_plan(step - 1)

        if self.store is not None and step >= 2:
            # History becomes visible at epoch granularity: step k drafts from
            # the previous epoch's responses.
            prev = self.trace.epoch_responses(step - 1)
            for pid in sorted(prev):
                self.store.ingest_epoch(pid, step - 1, prev[pid])
            self.store.flush()

        counters_before = (self.stats.tokens_total, self.stats.tokens_speculated,
                           self.stats.tokens_accepted, self.stats.verify_passes,
                           self.stats.decode_passes)
        if self.policy.is_histopipe and step >= 2:
            plan = self._plan_histopipe(step)
        else:
            plan = self._plan_round_robin(step)
        self.plans[step] = plan
        self._record_step_spec_stats(step, counters_before)

        scheduled = 0
        for share in plan.shares.values():
            for task in share:
                self.scheduled_ids[task.sid] = step
                scheduled += 1
        self.total_samples += scheduled
        self.expected[step] = self.expected.get(step, 0) + scheduled
        self.rewarded.setdefault(step, 0)
        for task in self.carry_in.get(step, []):
            if task.worker is None:
                self._bind_carry(plan, task)

        self._emit("step_boundary", {
            "step": step,
            "policy": plan.policy_kind,
            "workers": {str(w): g for w, g in sorted(plan.worker_groups.items())},
            "allocation": plan.allocation.as_dict() if plan.allocation else None,
        })
        return plan

    def _plan_round_robin(self, step: int) -> _StepPlan:
        epoch_responses = self.trace.epoch_responses(step)
        shares_raw: dict[int, list] = {w.wid: [] for w in self.workers}
        i = 0
        for pid in sorted(epoch_responses):
            for member, resp in enumerate(epoch_responses[pid]):
                shares_raw[i % len(self.workers)].append((member, resp, None))
                i += 1
        shares = self._make_tasks(step, shares_raw)
        return _StepPlan(
            step=step, groups=None, worker_groups={w.wid: 0 for w in self.workers},
            shares=shares, group_total={}, group_completed={},
            policy_kind="colocated" if self.policy.name == "colocated" else "streaming",
        )

    def _plan_histopipe(self, step: int) -> _StepPlan:
        n_groups = self.cluster.n_groups
        groups = build_groups(self._prompt_stats(step - 1), n_groups)
        order = assignment_order(step, n_groups)
        wks = self.cluster.rollout_workers

        group_batches = {
            g.index: sum(len(self.trace.group(step, pid)) for pid in g.prompt_ids)
            for g in groups
        }
        allocation = None
        if self.policy.name == "histopipe_two_tier":
            # Pre-profile tau from each group's previous-epoch member lengths,
            # keyed by representative length (distinct per group; reps are
            # non-decreasing by construction).
            prev_epoch = self.trace.epoch_responses(step - 1)
            member_lens_by_rep: dict[float, list[int]] = {}
            reps = []
            for g in groups:
                rep = g.representative_len
                while rep in member_lens_by_rep:
                    rep = math.nextafter(rep, math.inf)
                member_lens_by_rep[rep] = [
                    r.generated_len for pid in g.prompt_ids for r in prev_epoch[pid]
                ]
                reps.append(rep)
            model = _GroupProfileModel(member_lens_by_rep, self.cost, self._accepted_per_pass())
            max_wks = self.cluster.max_wks or max(self.cluster.min_wks, wks - (n_groups - 1))
            # Until a train stage has actually run, estimate its duration from
            # the cost model; the t0 >= t_train floor is what keeps the
            # shortest group from hogging near-max workers.
            t_train = self.last_train_duration
            if not self.train_done_time:
                t_train = self.cost.t_train(sum(group_batches.values()))
            allocation = plan_allocation(
                reps, wks, t_train,
                model, min_wks=self.cluster.min_wks, max_wks=max_wks,
                precision=self.policy.plan_precision,
            )
            if not allocation.feasible:
                raise InfeasiblePlanError(
                    f"step {step}: no feasible allocation for {wks} workers over "
                    f"{n_groups} groups (t0={allocation.t0:.3f})"
                )
            counts = list(allocation.per_group_workers)
            # Spend leftover budget on the longest groups.
            spare = wks - sum(counts)
            g = n_groups - 1
            while spare > 0:
                counts[g] += 1
                spare -= 1
                g = g - 1 if g > 0 else n_groups - 1
        else:
            counts = partition_sizes(wks, n_groups)
        for grp, count in zip(groups, counts):
            grp.assigned_workers = count

        worker_groups: dict[int, int] = {}
        next_wid = 0
        for slot in range(n_groups):
            g = order[slot]
            for _ in range(counts[g]):
                worker_groups[next_wid] = g
                next_wid += 1
        group_workers: dict[int, list[int]] = {g.index: [] for g in groups}
        for wid in sorted(worker_groups):
            group_workers[worker_groups[wid]].append(wid)

        shares_raw: dict[int, list] = {w.wid: [] for w in self.workers}
        for grp in groups:
            wids = group_workers[grp.index]
            i = 0
            for pid in grp.prompt_ids:
                for member, resp in enumerate(self.trace.group(step, pid)):
                    shares_raw[wids[i % len(wids)]].append((member, resp, grp.index))
                    i += 1
        shares = self._make_tasks(step, shares_raw)
        return _StepPlan(
            step=step, groups=groups, worker_groups=worker_groups, shares=shares,
            group_total=dict(group_batches),
            group_completed={g.index: 0 for g in groups},
            policy_kind=self.policy.name, allocation=allocation,
        )

    def _record_step_spec_stats(self, step: int, before: tuple) -> None:
        total = self.stats.tokens_total - before[0]
        speculated = self.stats.tokens_speculated - before[1]
        accepted = self.stats.tokens_accepted - before[2]
        verify = self.stats.verify_passes - before[3]
        decode = self.stats.decode_passes - before[4]
        spec_rate = accepted / total if total else 0.0
        acc_rate = accepted / speculated if speculated else 0.0
        self.spec_stats_rows.append(
            [step, f"{spec_rate:.6f}", f"{acc_rate:.6f}", verify, decode]
        )

    def _accepted_per_pass(self) -> float:
        passes = self.stats.verify_passes + self.stats.decode_passes
        if not self.policy.speculation or passes == 0:
            return 0.0
        return max(0.0, self.stats.tokens_total / passes - 1.0)

    def _bind_carry(self, plan: _StepPlan, task: _Task) -> None:
        # A continuation joins the workers serving its prompt's group next
        # step (or any worker under round-robin plans).
        group = None
        if plan.groups is not None:
            group = next((g.index for g in plan.groups if task.prompt in g.prompt_ids), None)
        wids = [w for w, g in plan.worker_groups.items() if group is None or g == group]
        target = min(wids, key=lambda w: (len(plan.shares.get(w, [])), w))
        task.worker = target
        task.group = group
        if group is not None:
            plan.group_total[group] = plan.group_total.get(group, 0) + 1
        running = self.workers[target]
        if running.step == plan.step:
            self._advance_worker(running, self.now)
            running.inflight[task.sid] = task
            running.begin("rollout", self.now)
            running.last_advance = self.now
            self._reschedule(running)

    # -- time advancement ------------------------------------------------------

    def _t_iter(self, worker: _Worker) -> float:
        return self.cost.t_iter(len(worker.inflight))

    def _advance_worker(self, worker: _Worker, to_time: float) -> None:
        elapsed = to_time - worker.last_advance
        if elapsed > 0 and worker.inflight:
            rate = self._t_iter(worker)
            for task in worker.inflight.values():
                slice_left = elapsed
                if task.prefill_left > 0:
                    used = min(task.prefill_left, slice_left)
                    task.prefill_left -= used
                    slice_left -= used
                if slice_left > 0:
                    task.remaining -= slice_left / rate
        worker.last_advance = max(worker.last_advance, to_time)

    def _reschedule(self, worker: _Worker) -> None:
        worker.sched_version += 1
        if not worker.inflight:
            return
        rate = self._t_iter(worker)
        best = None
        for sid in sorted(worker.inflight):
            task = worker.inflight[sid]
            t = task.prefill_left + max(0.0, task.remaining) * rate
            if best is None or t < best:
                best = t
        self._push(worker.last_advance + best, "completion", (worker.wid, worker.sched_version))

    # -- worker lifecycle -------------------------------------------------------

    def _weights_available_at(self, step: int) -> float:
        version = step - 1
        if version <= 1 and self.policy.name != "colocated":
            return 0.0
        if self.policy.name == "colocated":
            if step == 1:
                return 0.0
            return self.weight_avail.get(version, math.inf)
        return self.weight_avail.get(version, math.inf)

    def _try_start(self, worker: _Worker, step: int) -> None:
        if step > self.steps:
            return
        plan = self._ensure_plan(step)
        avail = self._weights_available_at(step)
        if math.isinf(avail):
            # Version not published yet; its train_done will wake us.
            self.weight_waiters.setdefault(step - 1, []).append((worker.wid, step))
            return
        start = max(worker.free_at, avail, self.now)
        if start > self.now + _EPS:
            self._push(start, "start", (worker.wid, step))
            return
        worker.step = step
        share = list(plan.shares.get(worker.wid, []))
        share.extend(t for t in self.carry_in.get(step, [])
                     if t.worker == worker.wid and t.sid not in worker.inflight)
        worker.inflight = {t.sid: t for t in share}
        worker.last_advance = self.now
        if worker.inflight:
            worker.begin("rollout", self.now)
            self._reschedule(worker)
        else:
            self._finish_step_share(worker)

    def _finish_step_share(self, worker: _Worker) -> None:
        worker.finish(self.now)
        worker.free_at = max(worker.free_at, self.now)
        if worker.step + 1 <= self.steps:
            self._push(self.now, "start", (worker.wid, worker.step + 1))
        if self.policy.name == "colocated":
            self._push(self.now, "train_check", (worker.step,))

    # -- event handlers ----------------------------------------------------------

    def _on_completion(self, wid: int, sched_version: int) -> None:
        worker = self.workers[wid]
        if sched_version != worker.sched_version:
            return
        self._advance_worker(worker, self.now)
        plan = self.plans[worker.step]
        finished = [sid for sid in sorted(worker.inflight)
                    if worker.inflight[sid].remaining <= _EPS
                    and worker.inflight[sid].prefill_left <= _EPS]
        for sid in finished:
            task = worker.inflight.pop(sid)
            self.completed_ids[sid] = worker.step
            if task.group is not None:
                plan.group_completed[task.group] = plan.group_completed.get(task.group, 0) + 1
            self._emit("rollout_finish", {
                "sample": sid, "worker": wid, "step": worker.step,
                "scheduled_step": task.epoch,
                "weight_version": task.weight_version,
                "continuation_version": task.continuation_version,
                "tokens": task.tokens_len, "iterations": task.total_iters,
                "migrated": task.migrated,
            })
            self._queue_reward(sid, worker.step)
        if finished and plan.groups is not None and self.policy.migration:
            self._check_migrations(plan)
        if worker.inflight:
            self._reschedule(worker)
        elif worker.busy_since is not None:
            self._finish_step_share(worker)

    def _queue_reward(self, sid: str, attr_step: int) -> None:
        free_t, ridx = heapq.heappop(self.reward_free)
        start = max(self.now, free_t)
        done = start + self.cost.reward_time
        heapq.heappush(self.reward_free, (done, ridx))
        self.reward_spans.append((start, done))
        self._push(done, "reward_done", (sid, attr_step))

    def _beta_for_step(self, step: int) -> float:
        if step not in self._beta_cache:
            if step < 3:
                self._beta_cache[step] = 1.1
            else:
                prev = self._prompt_stats(step - 2)
                cur = self._prompt_stats(step - 1)
                rates = [cur[p].median_len / prev[p].median_len
                         for p in sorted(cur) if p in prev and prev[p].median_len > 0]
                self._beta_cache[step] = beta_from_history(rates)
        return self._beta_cache[step]

    def _check_migrations(self, plan: _StepPlan) -> None:
        n_groups = self.cluster.n_groups
        policy = MigrationPolicy(beta=self._beta_for_step(plan.step))
        live: dict[int, list[_Worker]] = {}
        for wid in sorted(plan.worker_groups):
            worker = self.workers[wid]
            if worker.step == plan.step and worker.inflight:
                live.setdefault(plan.worker_groups[wid], []).append(worker)
        active_loads = {
            g: sum(len(w.inflight) for w in ws) / len(ws) for g, ws in live.items()
        }
        for g in sorted(live):
            group = plan.groups[g]
            for worker in live[g]:
                self._advance_worker(worker, self.now)
                for sid in sorted(list(worker.inflight)):
                    task = worker.inflight.get(sid)
                    if task is None or task.migrated:
                        continue
                    decision = migration_decision(
                        group, task.generated_len(), plan.group_completed.get(g, 0),
                        plan.group_total.get(g, 0), policy, n_groups, active_loads,
                    )
                    if not decision.migrates:
                        continue
                    if decision.kind == "intra_step":
                        self._migrate_intra(plan, worker, task, decision.target_group)
                    elif plan.step < self.steps:
                        self._migrate_inter(plan, worker, task)

    def _migrate_intra(self, plan: _StepPlan, source: _Worker, task: _Task,
                       target_group: int) -> None:
        candidates = [
            self.workers[wid]
            for wid, g in plan.worker_groups.items()
            if g == target_group and self.workers[wid].step == plan.step
            and self.workers[wid].inflight
        ]
        if not candidates:
            return
        target = min(candidates, key=lambda w: (len(w.inflight), w.wid))
        del source.inflight[task.sid]
        self._advance_worker(target, self.now)
        generated = task.generated_len()
        task.prefill_left = generated * self.cost.prefill_per_token
        task.migrated = True
        old_group = task.group
        task.group = target_group
        task.worker = target.wid
        plan.group_total[old_group] -= 1
        plan.group_total[target_group] += 1
        target.inflight[task.sid] = task
        self.migrations += 1
        self._emit("migration", {
            "sample": task.sid, "migration_kind": "intra_step",
            "from_group": old_group, "to_group": target_group,
            "from_worker": source.wid, "to_worker": target.wid,
            "generated": generated,
        })
        self._reschedule(target)
        if source.inflight:
            self._reschedule(source)
        else:
            self._finish_step_share(source)

    def _migrate_inter(self, plan: _StepPlan, source: _Worker, task: _Task) -> None:
        del source.inflight[task.sid]
        next_step = plan.step + 1
        generated = task.generated_len()
        task.migrated = True
        task.prefill_left = generated * self.cost.prefill_per_token
        task.continuation_version = next_step - 1
        plan.group_total[task.group] -= 1
        task.worker = None
        self.expected[plan.step] = self.expected.get(plan.step, 0) - 1
        self.expected[next_step] = self.expected.get(next_step, 0) + 1
        self.migrations += 1
        self.inter_migrations += 1
        self._emit("migration", {
            "sample": task.sid, "migration_kind": "inter_step",
            "from_group": task.group, "to_step": next_step,
            "from_worker": source.wid, "generated": generated,
        })
        self.carry_in.setdefault(next_step, []).append(task)
        if next_step in self.plans:
            self._bind_carry(self.plans[next_step], task)
        self._push(self.now, "train_check", (plan.step,))
        if source.inflight:
            self._reschedule(source)
        else:
            self._finish_step_share(source)

    def _on_reward_done(self, sid: str, attr_step: int) -> None:
        # A sample rewarded after its step's train started counts toward the
        # next step still accepting samples.
        step = attr_step
        while step in self.train_started and step < self.steps:
            step += 1
        if step in self.train_started:
            self._emit("reward_done", {"sample": sid, "step": attr_step, "buffered_for": None})
            return
        self.rewarded[step] = self.rewarded.get(step, 0) + 1
        self._emit("reward_done", {
            "sample": sid, "step": attr_step,
            "buffered_for": step if step != attr_step else None,
        })
        self._push(self.now, "train_check", (step,))

    def _train_threshold(self, step: int) -> int:
        frac = 1.0 - self.policy.oversample_pct / 100.0
        return max(1, math.ceil(self.expected.get(step, 0) * frac))

    def _on_train_check(self, step: int) -> None:
        if step in self.train_started or step > self.steps or step not in self.plans:
            return
        if step > 1 and (step - 1) not in self.train_started:
            return  # train jobs run in step order
        if self.rewarded.get(step, 0) < self._train_threshold(step):
            return
        if self.policy.name == "colocated":
            self._start_colocated_train(step)
        else:
            start = max(self.now, self.train_free)
            duration = self.cost.t_train(self.rewarded.get(step, 0))
            self.train_started.add(step)
            self.train_free = start + duration
            self.train_spans.append((start, start + duration))
            self._push(start + duration, "train_done", (step, start))

    def _start_colocated_train(self, step: int) -> None:
        # Strict alternation: every worker must have drained this step first.
        for worker in self.workers:
            if worker.step < step or worker.inflight:
                return
        if any(t.worker is None for t in self.carry_in.get(step, [])):
            return
        self.train_started.add(step)
        batch = self.rewarded.get(step, 0)
        duration = self.cost.t_train(batch)
        switch = self.cost.context_switch_frac * duration
        start = self.now
        for worker in self.workers:
            worker.finish(self.now)
            worker.intervals.append((start, start + switch, "switch"))
            worker.intervals.append((start + switch, start + switch + duration, "train"))
            worker.intervals.append((start + switch + duration,
                                     start + 2 * switch + duration, "switch"))
            worker.free_at = start + 2 * switch + duration
        self.train_spans.append((start + switch, start + switch + duration))
        self._push(start + switch + duration, "train_done", (step, start + switch))

    def _on_train_done(self, step: int, start: float) -> None:
        duration = self.now - start
        self.last_train_duration = duration
        self.train_done_time[step] = self.now
        # Weights trained on step k are current for step k+1 under colocated
        # alternation and for step k+2 in the overlapped pipeline; the version
        # is named by the step it serves.
        if self.policy.name == "colocated":
            version = step
            avail = self.now
        else:
            version = step + 1
            avail = self.now + self.cluster.weight_propagation_delay
        self.weight_avail[version] = avail
        self._emit("train_done", {
            "step": step, "batch": self.rewarded.get(step, 0),
            "duration": duration, "publishes_version": version,
        })
        self._emit("weight_update", {
            "version": version, "trained_on_step": step, "available_at": avail,
        })
        for wid, wait_step in self.weight_waiters.pop(version, []):
            self._push(avail, "start", (wid, wait_step))
        self._push(self.now, "train_check", (step + 1,))
        if self.policy.name == "colocated":
            for worker in self.workers:
                self._push(worker.free_at, "start", (worker.wid, step + 1))

    # -- main loop ----------------------------------------------------------------

    def run(self) -> SimResult:
        for worker in self.workers:
            self._push(0.0, "start", (worker.wid, 1))
        while self._heap:
            time, _seq, kind, data = heapq.heappop(self._heap)
            self.now = max(self.now, time)
            if kind == "start":
                wid, step = data
                worker = self.workers[wid]
                if worker.step >= step or worker.inflight:
                    continue
                if worker.step == step - 1:
                    self._try_start(worker, step)
            elif kind == "completion":
                self._on_completion(*data)
            elif kind == "reward_done":
                self._on_reward_done(*data)
            elif kind == "train_check":
                self._on_train_check(*data)
            elif kind == "train_done":
                self._on_train_done(*data)
        if self.store is not None:
            self.store.close()
        return self._finalize()

    # -- metrics --------------------------------------------------------------

    def _finalize(self) -> SimResult:
        makespan = self.now
        for worker in self.workers:
            worker.finish(makespan)
        timeline = []
        busy = {}
        kinds: dict[str, float] = {"rollout": 0.0, "train": 0.0, "switch": 0.0}
        rollout_spans = []
        for worker in self.workers:
            intervals = sorted(worker.intervals)
            total = 0.0
            prev_end = 0.0
            for start, end, kind in intervals:
                if start < prev_end - 1e-6:
                    raise AssertionError(f"overlapping intervals on worker {worker.wid}")
                prev_end = end
                total += end - start
                kinds[kind] = kinds.get(kind, 0.0) + (end - start)
                timeline.append((worker.wid, start, end, kind))
                if kind == "rollout":
                    rollout_spans.append((start, end))
            busy[worker.wid] = total
        n = len(self.workers)
        wall = makespan * n if makespan > 0 else 1.0
        bubble_per_worker = [
            (makespan - busy[w.wid]) / makespan if makespan > 0 else 0.0
            for w in self.workers
        ]
        idle_total = sum(makespan - busy[w.wid] for w in self.workers)
        shares = {k: v / wall for k, v in kinds.items()}
        shares["idle"] = idle_total / wall

        durations = {
            "rollout": _union_length(rollout_spans),
            "reward": _union_length(self.reward_spans),
            "train": _union_length(self.train_spans),
        }

        samples = len(self.completed_ids)
        metrics = MetricsReport(
            samples_per_second=samples / makespan if makespan > 0 else 0.0,
            makespan=makespan,
            samples=samples,
            steps=self.steps,
            bubble_fraction=idle_total / wall,
            bubble_per_worker=bubble_per_worker,
            stage_shares=shares,
            stage_durations=durations,
            migration_pct=100.0 * self.migrations / self.total_samples if self.total_samples else 0.0,
            speculation_rate=self.stats.speculation_rate,
            acceptance_rate=self.stats.acceptance_rate,
        )
        accounting = {
            "scheduled": dict(sorted(self.scheduled_ids.items())),
            "completed": dict(sorted(self.completed_ids.items())),
            "migrations": self.migrations,
            "inter_migrations": self.inter_migrations,
        }
        return SimResult(metrics=metrics, events=self.events, timeline=sorted(timeline),
                         accounting=accounting, spec_stats_rows=self.spec_stats_rows)


def _union_length(spans: list[tuple[float, float]]) -> float:
    if not spans:
        return 0.0
    total = 0.0
    spans = sorted(spans)
    cur_s, cur_e = spans[0]
    for s, e in spans[1:]:
        if s > cur_e:
            total += cur_e - cur_s
            cur_s, cur_e = s, e
        else:
            cur_e = max(cur_e, e)
    total += cur_e - cur_s
    return total


def run(trace: Trace | list[Response], cluster: ClusterSpec, policy: Policy,
        cost: CostConfig | None = None, spec_config: SpecConfig | None = None,
        seed: int = 0) -> SimResult:
    """Simulate the full pipeline over the trace; deterministic per inputs."""
    if not isinstance(trace, Trace):
        trace = Trace(trace)
    sim = _Simulation(trace, cluster, policy, cost or CostConfig(),
                      spec_config or SpecConfig(), seed)
    return sim.run()

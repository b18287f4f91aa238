"""Event-driven continuous-time simulator.

Competing exponential clocks drive tracked queues (supplier arrivals,
aggregate abandonment at rate mu * length, customer arrivals).  Long and
removed queues interact with the rest of the system only at customer-arrival
instants, so between interactions they are fast-forwarded through the exact
M/M/inf transient law (binomial survivors + thinned Poisson arrivals), which
is what makes million-time-unit horizons affordable.  Their emptiness is
sampled at customer arrivals (unbiased by PASTA).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InvalidInstance
from .instance import Instance
from .policies import (
    DlpAdaptivePolicy,
    PriorityRoundingPolicy,
    StaticRatePolicy,
    StaticThresholdPolicy,
    VirtualBuffer,
)


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    warmup: float | None = None  # defaults to 10% of the horizon
    seed: int = 0
    replications: int = 1
    batches: int = 20

    def __post_init__(self):
        if self.horizon <= 0:
            raise InvalidInstance("horizon must be positive")
        warm = 0.1 * self.horizon if self.warmup is None else self.warmup
        if not (0 <= warm < self.horizon):
            raise InvalidInstance("need horizon > warmup >= 0")
        object.__setattr__(self, "warmup", warm)
        if self.replications < 1:
            raise InvalidInstance("replications must be >= 1")
        if self.batches < 2:
            raise InvalidInstance("need at least 2 batches for standard errors")


@dataclass
class SimMetrics:
    throughput_rate: float
    throughput_stderr: float
    cost_rate: float
    cost_stderr: float
    tau_hat: np.ndarray
    tau_stderr: np.ndarray
    short_state_occupancy: dict[tuple[int, ...], float]
    long_empty_fraction: dict[int, float]
    buffer_time_avg: dict[tuple[int, int], float]
    buffer_batch_avgs: np.ndarray  # (batches,) total-buffer averages
    event_count: int
    supplier_accounting: dict[str, np.ndarray]
    customer_accounting: dict[str, np.ndarray]
    cross_cell_matches: int = 0
    noncontentious_covered_fraction: float = 0.0
    horizon: float = 0.0
    warmup: float = 0.0
    seed: int = 0
    replications: int = 1
    replicates: list["SimMetrics"] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "throughput_rate": self.throughput_rate,
            "throughput_stderr": self.throughput_stderr,
            "cost_rate": self.cost_rate,
            "cost_stderr": self.cost_stderr,
            "tau_hat": self.tau_hat.tolist(),
            "tau_stderr": self.tau_stderr.tolist(),
            "long_empty_fraction": {str(k): v for k, v in self.long_empty_fraction.items()},
            "buffer_time_avg": {f"{i},{j}": v for (i, j), v in self.buffer_time_avg.items()},
            "event_count": self.event_count,
            "cross_cell_matches": self.cross_cell_matches,
            "horizon": self.horizon,
            "warmup": self.warmup,
            "seed": self.seed,
            "replications": self.replications,
        }


class _Uniforms:
    """Block-buffered uniforms; one numpy call per 2^16 draws."""

    __slots__ = ("rng", "block", "pos")

    def __init__(self, rng):
        self.rng = rng
        self.block = rng.random(65536)
        self.pos = 0

    def next(self) -> float:
        if self.pos >= 65536:
            self.block = self.rng.random(65536)
            self.pos = 0
        v = self.block[self.pos]
        self.pos += 1
        return v


def simulate(inst: Instance, policy, cfg: SimConfig) -> SimMetrics:
    """Simulate a policy; returns aggregate metrics with one replicate per
    configured replication (independent seeds)."""
    reps = [
        _simulate_once(inst, policy, cfg, rep_index=r)
        for r in range(cfg.replications)
    ]
    if len(reps) == 1:
        return reps[0]
    agg = _aggregate(inst, reps, cfg)
    return agg


def _aggregate(inst: Instance, reps: list[SimMetrics], cfg: SimConfig) -> SimMetrics:
    k = len(reps)
    tau_hat = np.mean([r.tau_hat for r in reps], axis=0)
    tau_se = np.std([r.tau_hat for r in reps], axis=0, ddof=1) / math.sqrt(k)
    thr = float(np.mean([r.throughput_rate for r in reps]))
    thr_se = float(np.std([r.throughput_rate for r in reps], ddof=1) / math.sqrt(k))
    cost = float(np.mean([r.cost_rate for r in reps]))
    cost_se = float(np.std([r.cost_rate for r in reps], ddof=1) / math.sqrt(k))
    occ: dict[tuple[int, ...], float] = {}
    for r in reps:
        for s, w in r.short_state_occupancy.items():
            occ[s] = occ.get(s, 0.0) + w / k
    empty = {
        i: float(np.mean([r.long_empty_fraction.get(i, 0.0) for r in reps]))
        for i in reps[0].long_empty_fraction
    }
    buf_keys = {key for r in reps for key in r.buffer_time_avg}
    buf = {key: float(np.mean([r.buffer_time_avg.get(key, 0.0) for r in reps])) for key in buf_keys}
    return SimMetrics(
        throughput_rate=thr,
        throughput_stderr=thr_se,
        cost_rate=cost,
        cost_stderr=cost_se,
        tau_hat=tau_hat,
        tau_stderr=tau_se,
        short_state_occupancy=occ,
        long_empty_fraction=empty,
        buffer_time_avg=buf,
        buffer_batch_avgs=np.concatenate([r.buffer_batch_avgs for r in reps]),
        event_count=sum(r.event_count for r in reps),
        supplier_accounting=reps[0].supplier_accounting,
        customer_accounting=reps[0].customer_accounting,
        cross_cell_matches=sum(r.cross_cell_matches for r in reps),
        horizon=cfg.horizon,
        warmup=cfg.warmup,
        seed=cfg.seed,
        replications=k,
        replicates=reps,
    )


def _simulate_once(inst: Instance, policy, cfg: SimConfig, rep_index: int) -> SimMetrics:
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed, rep_index]))
    if isinstance(policy, PriorityRoundingPolicy):
        return _run_priority(inst, policy, cfg, rng)
    return _run_tracked(inst, policy, cfg, rng)


# ---------------------------------------------------------------------------
# Fully tracked engine (single-queue policies, static-rate rounding,
# composite cell policies with small rates)


def _run_tracked(inst: Instance, policy, cfg: SimConfig, rng) -> SimMetrics:
    n, m = inst.n, inst.m
    mu = inst.abandonment_rate
    lam = inst.supplier_rates
    gam = inst.customer_rates
    lam_tot = float(lam.sum())
    gam_tot = float(gam.sum())
    lam_cum = np.cumsum(lam)
    gam_cum = np.cumsum(gam)
    uni = _Uniforms(rng)

    horizon, warmup = cfg.horizon, cfg.warmup
    window = horizon - warmup
    batches = cfg.batches
    batch_len = window / batches

    lengths = [0] * n
    ell_sum = 0
    match_counts = np.zeros((batches, n, m))
    occ: dict[tuple[int, ...], float] = {}
    arr_s = np.zeros(n, dtype=np.int64)
    matched_s = np.zeros(n, dtype=np.int64)
    abandoned_s = np.zeros(n, dtype=np.int64)
    discarded_s = np.zeros(n, dtype=np.int64)
    arr_c = np.zeros(m, dtype=np.int64)
    matched_c = np.zeros(m, dtype=np.int64)
    cross_cell = 0

    # Policy-specific preparation.
    kind, ctx = _prepare_tracked_policy(inst, policy, rng)
    decide = ctx["decide"]
    caps = ctx.get("caps")  # per-queue length caps (discard above), or None

    t = 0.0
    events = 0
    state = tuple(lengths)
    while True:
        rate = lam_tot + gam_tot + mu * ell_sum
        dt = -math.log(1.0 - uni.next()) / rate
        t_next = t + dt
        if t_next > horizon:
            _add_occ(occ, state, max(0.0, horizon - max(t, warmup)))
            t = horizon
            break
        if t_next > warmup:
            _add_occ(occ, state, t_next - max(t, warmup))
        t = t_next
        events += 1
        u = uni.next() * rate
        if u < lam_tot:
            i = int(np.searchsorted(lam_cum, u, side="right"))
            arr_s[i] += 1
            if caps is not None and lengths[i] >= caps[i]:
                discarded_s[i] += 1
            else:
                lengths[i] += 1
                ell_sum += 1
                state = tuple(lengths)
        elif u < lam_tot + gam_tot:
            j = int(np.searchsorted(gam_cum, u - lam_tot, side="right"))
            arr_c[j] += 1
            target = decide(j, state, uni)
            if target is not None:
                if lengths[target] <= 0:
                    raise AssertionError("policy matched against an empty queue")
                cell_ok = ctx.get("same_cell")
                if cell_ok is not None and not cell_ok(target, j):
                    cross_cell += 1
                lengths[target] -= 1
                ell_sum -= 1
                matched_s[target] += 1
                matched_c[j] += 1
                if t >= warmup:
                    b = min(int((t - warmup) / batch_len), batches - 1)
                    match_counts[b, target, j] += 1
                state = tuple(lengths)
        else:
            v = u - lam_tot - gam_tot
            acc = 0.0
            i = n - 1
            for q in range(n):
                acc += mu * lengths[q]
                if v < acc:
                    i = q
                    break
            lengths[i] -= 1
            ell_sum -= 1
            abandoned_s[i] += 1
            state = tuple(lengths)

    return _package_metrics(
        inst,
        cfg,
        occ,
        match_counts,
        window,
        events,
        arr_s,
        matched_s,
        abandoned_s,
        discarded_s,
        np.array(lengths, dtype=np.int64),
        arr_c,
        matched_c,
        long_empty={},
        buffer_avg={},
        buffer_batches=np.zeros(cfg.batches),
        cross_cell=cross_cell,
    )


def _prepare_tracked_policy(inst: Instance, policy, rng):
    if isinstance(policy, StaticThresholdPolicy):
        if inst.n != 1:
            raise InvalidInstance("static threshold policies are single-queue")
        probs = policy.serve_probs(inst.m)

        def decide(j, state, uni):
            if state[0] <= 0:
                return None
            p = probs[j]
            if p >= 1.0 or (p > 0.0 and uni.next() < p):
                return 0
            return None

        return "static", {"decide": decide}

    if isinstance(policy, DlpAdaptivePolicy):
        if inst.n != 1:
            raise InvalidInstance("adaptive table policies are single-queue")
        cap = policy.cap
        cum = np.cumsum(policy.table.rows, axis=1)
        # The commitment is drawn fresh at each customer arrival; holding one
        # set between transitions would let arrivals see a survival-biased
        # draw (large committed sets match and vanish sooner) and the
        # occupancy identity would break.
        sets = [frozenset(s) for s in policy.table.family.sets]

        def decide(j, state, uni):
            if state[0] < 1:
                return None
            row = cum[min(state[0], cap)]
            u = min(int(np.searchsorted(row, uni.next(), side="right")), len(sets) - 1)
            return 0 if j in sets[u] else None

        return "dlp", {"decide": decide, "caps": [cap]}

    if isinstance(policy, StaticRatePolicy):
        def decide(j, state, uni):
            i = policy.draw_queue(j, uni.next())
            if i is not None and state[i] > 0:
                return i
            return None

        return "static_rate", {"decide": decide}

    # Composite cell policies register through this hook.
    prep = getattr(policy, "prepare_tracked", None)
    if prep is not None:
        return "composite", prep(inst, rng)
    raise InvalidInstance(f"unsupported policy type {type(policy).__name__} for tracked engine")


def _add_occ(occ: dict, state: tuple, w: float) -> None:
    if w > 0.0:
        occ[state] = occ.get(state, 0.0) + w


# ---------------------------------------------------------------------------
# Priority rounding engine (tracked shorts + batched long/removed queues)


def _run_priority(inst: Instance, policy: PriorityRoundingPolicy, cfg: SimConfig, rng) -> SimMetrics:
    n, m = inst.n, inst.m
    mu = inst.abandonment_rate
    gam = inst.customer_rates
    gam_tot = float(gam.sum())
    gam_cum = np.cumsum(gam)
    uni = _Uniforms(rng)

    shorts = list(policy.short)
    n_s = len(shorts)
    cap = policy.cap
    lam_short = [float(inst.supplier_rates[i]) for i in shorts]
    lam_short_tot = float(sum(lam_short))
    lam_short_cum = np.cumsum(lam_short) if n_s else np.zeros(0)
    batched = [i for i in range(n) if i not in policy.short]  # long + removed
    lam_batched = {i: float(inst.supplier_rates[i]) for i in batched}
    longs = list(policy.long)

    horizon, warmup = cfg.horizon, cfg.warmup
    window = horizon - warmup
    batches = cfg.batches
    batch_len = window / batches

    lengths = [0] * n_s
    ell_sum = 0
    blen = {i: 0 for i in batched}
    bsync = {i: 0.0 for i in batched}
    barr = {i: 0 for i in batched}
    babandon = {i: 0 for i in batched}
    bmatched = {i: 0 for i in batched}

    buffers = VirtualBuffer()
    buf_integral: dict[tuple[int, int], float] = {}
    buf_batch = np.zeros(batches)
    buf_last_t = warmup
    buf_total = 0

    match_counts = np.zeros((batches, n, m))
    occ: dict[tuple[int, ...], float] = {}
    arr_s = np.zeros(n, dtype=np.int64)
    matched_s = np.zeros(n, dtype=np.int64)
    abandoned_s = np.zeros(n, dtype=np.int64)
    discarded_s = np.zeros(n, dtype=np.int64)
    arr_c = np.zeros(m, dtype=np.int64)
    matched_c = np.zeros(m, dtype=np.int64)
    empty_seen = {i: 0 for i in longs}
    drawn_seen = {i: 0 for i in longs}
    arrivals_seen = 0
    noncont_arrivals = 0
    noncont_covered = 0

    contentious = policy.contentious
    simplified = policy.simplified
    y = policy.y
    eps = policy.epsilon
    # Per-type cumulative pick tables as plain lists: the arrays are tiny and
    # linear scans beat numpy searchsorted several-fold in this loop.
    long_pick: dict[int, list[tuple[float, int]]] = {}
    surplus_pick: dict[int, list[tuple[float, int]] | None] = {}
    # Fault-injection hook used by the buffer-stability tests: disabling
    # surplus matching leaves scheduled matches unfulfilled forever.
    surplus_enabled = not getattr(policy, "disable_surplus_matching", False)
    for j in range(m):
        acc_p = 0.0
        table = []
        for i in longs:
            acc_p += (1.0 - eps) * y[i, j]
            table.append((acc_p, i))
        long_pick[j] = table
        total_y = sum(y[i, j] for i in longs)
        if total_y > 0 and surplus_enabled:
            acc_p = 0.0
            stable = []
            for i in longs:
                acc_p += y[i, j] / total_y
                stable.append((acc_p, i))
            surplus_pick[j] = stable
        else:
            surplus_pick[j] = None

    assignments = policy.assignments
    sampler: dict[tuple[int, ...], tuple[list[float], list[int]]] = {}
    for st, ids in policy.state_assignment_ids.items():
        cum = policy.state_assignment_cum[st]
        total = float(cum[-1])
        sampler[st] = ([float(c) / total for c in cum], [int(a) for a in ids])
    lam_short_scan = list(np.cumsum(lam_short)) if n_s else []
    gam_scan = list(np.cumsum(gam))
    anomalies = 0

    def sync_batched(i: int, now: float) -> None:
        nonlocal blen
        dt = now - bsync[i]
        if dt <= 0.0:
            return
        lam_i = lam_batched[i]
        nnew = int(rng.poisson(lam_i * dt))
        if mu > 0.0:
            p_old = math.exp(-mu * dt)
            s_old = int(rng.binomial(blen[i], p_old)) if blen[i] else 0
            q_new = -math.expm1(-mu * dt) / (mu * dt)
            s_new = int(rng.binomial(nnew, q_new)) if nnew else 0
        else:
            s_old, s_new = blen[i], nnew
        babandon[i] += (blen[i] - s_old) + (nnew - s_new)
        barr[i] += nnew
        blen[i] = s_old + s_new
        bsync[i] = now

    def settle_buffer(now: float) -> None:
        nonlocal buf_last_t, buf_total
        if now <= buf_last_t or buf_total == 0:
            buf_last_t = max(buf_last_t, now)
            return
        lo = buf_last_t
        hi = min(now, horizon)
        while lo < hi - 1e-15:
            b = min(int((lo - warmup) / batch_len), batches - 1)
            seg_end = min(hi, warmup + (b + 1) * batch_len)
            for key, v in buffers.counts.items():
                if v:
                    buf_integral[key] = buf_integral.get(key, 0.0) + v * (seg_end - lo)
            buf_batch[b] += buf_total * (seg_end - lo)
            lo = seg_end
        buf_last_t = now

    t = 0.0
    events = 0
    state = tuple(lengths)
    while True:
        rate = lam_short_tot + gam_tot + mu * ell_sum
        dt = -math.log(1.0 - uni.next()) / rate
        t_next = t + dt
        if t_next > horizon:
            _add_occ(occ, state, max(0.0, horizon - max(t, warmup)))
            if buf_total and horizon > buf_last_t:
                settle_buffer(horizon)
            t = horizon
            break
        if t_next > warmup:
            _add_occ(occ, state, t_next - max(t, warmup))
        t = t_next
        events += 1
        u = uni.next() * rate
        if u < lam_short_tot:
            s = n_s - 1
            for q in range(n_s):
                if u < lam_short_scan[q]:
                    s = q
                    break
            arr_s[shorts[s]] += 1
            if lengths[s] >= cap:
                discarded_s[shorts[s]] += 1
            else:
                lengths[s] += 1
                ell_sum += 1
                state = tuple(lengths)
        elif u < lam_short_tot + gam_tot:
            v = u - lam_short_tot
            j = m - 1
            for q in range(m):
                if v < gam_scan[q]:
                    j = q
                    break
            arr_c[j] += 1

            # --- sampling phase
            entry = sampler.get(state)
            i_short_slot = 0
            if entry is None:
                anomalies += 1
            else:
                cum, ids = entry
                uu = uni.next()
                pos = len(ids) - 1
                for k, c in enumerate(cum):
                    if uu < c:
                        pos = k
                        break
                i_short_slot = assignments[ids[pos]][j]
            if t >= warmup and j not in contentious:
                noncont_arrivals += 1
                if i_short_slot > 0:
                    noncont_covered += 1
            uu = uni.next()
            i_long = None
            for c, i in long_pick[j]:
                if uu < c:
                    i_long = i
                    break
            if i_long is not None:
                # Batched queues are exact between interactions, so syncing
                # only on a long draw is lossless; sampling emptiness at these
                # (state-independent) times keeps the estimate unbiased.
                sync_batched(i_long, t)
                if t >= warmup and i_long in empty_seen:
                    arrivals_seen += 1
                    drawn_seen[i_long] += 1
                    if blen[i_long] == 0:
                        empty_seen[i_long] += 1

            # --- matching & scheduling
            matched_queue = None
            blocked_low_priority = False
            if i_short_slot > 0:
                si = i_short_slot - 1
                if lengths[si] <= 0:
                    raise AssertionError("priority rounding matched an empty short queue")
                lengths[si] -= 1
                ell_sum -= 1
                state = tuple(lengths)
                matched_queue = shorts[si]
                if j in contentious and i_long is not None:
                    settle_buffer(t)
                    buffers.increment(i_long, j)
                    buf_total += 1
            elif i_long is not None:
                if blen[i_long] > 0:
                    blen[i_long] -= 1
                    bmatched[i_long] += 1
                    matched_queue = i_long
                else:
                    blocked_low_priority = True

            # --- surplus matching
            if matched_queue is None and j in contentious and not (simplified and blocked_low_priority):
                spick = surplus_pick[j]
                if spick is not None:
                    uu = uni.next()
                    i_dag = spick[-1][1]
                    for c, i in spick:
                        if uu < c:
                            i_dag = i
                            break
                    sync_batched(i_dag, t)
                    if buffers.get(i_dag, j) > 0 and blen[i_dag] > 0:
                        blen[i_dag] -= 1
                        bmatched[i_dag] += 1
                        matched_queue = i_dag
                    if buffers.get(i_dag, j) > 0:
                        settle_buffer(t)
                        buffers.decrement(i_dag, j)
                        buf_total -= 1

            if matched_queue is not None:
                matched_s[matched_queue] += 1
                matched_c[j] += 1
                if t >= warmup:
                    b = min(int((t - warmup) / batch_len), batches - 1)
                    match_counts[b, matched_queue, j] += 1
        else:
            v = u - lam_short_tot - gam_tot
            acc = 0.0
            s = n_s - 1
            for q in range(n_s):
                acc += mu * lengths[q]
                if v < acc:
                    s = q
                    break
            lengths[s] -= 1
            ell_sum -= 1
            abandoned_s[shorts[s]] += 1
            state = tuple(lengths)

    for i in batched:
        sync_batched(i, horizon)
        arr_s[i] = barr[i]
        matched_s[i] = bmatched[i]
        abandoned_s[i] = babandon[i]

    waiting = np.zeros(n, dtype=np.int64)
    for s, i in enumerate(shorts):
        waiting[i] = lengths[s]
    for i in batched:
        waiting[i] = blen[i]

    empty_frac = {
        i: (empty_seen[i] / drawn_seen[i] if drawn_seen[i] else 0.0) for i in longs
    }
    buf_avg = {key: v / window for key, v in buf_integral.items()}
    metrics = _package_metrics(
        inst,
        cfg,
        occ,
        match_counts,
        window,
        events,
        arr_s,
        matched_s,
        abandoned_s,
        discarded_s,
        waiting,
        arr_c,
        matched_c,
        long_empty=empty_frac,
        buffer_avg=buf_avg,
        buffer_batches=buf_batch / batch_len,
        cross_cell=0,
    )
    metrics.supplier_accounting["anomalies"] = np.array([anomalies])
    metrics.noncontentious_covered_fraction = (
        noncont_covered / noncont_arrivals if noncont_arrivals else 0.0
    )
    return metrics


def _package_metrics(
    inst,
    cfg,
    occ,
    match_counts,
    window,
    events,
    arr_s,
    matched_s,
    abandoned_s,
    discarded_s,
    waiting,
    arr_c,
    matched_c,
    long_empty,
    buffer_avg,
    buffer_batches,
    cross_cell,
) -> SimMetrics:
    batches = cfg.batches
    batch_len = window / batches
    rates = match_counts / batch_len  # (B, n, m)
    tau_hat = rates.mean(axis=0)
    tau_se = rates.std(axis=0, ddof=1) / math.sqrt(batches)
    cost_b = (rates * inst.costs[None, :, :]).sum(axis=(1, 2))
    thr_b = rates.sum(axis=(1, 2))
    total = sum(occ.values())
    occ_norm = {s: w / total for s, w in occ.items()} if total > 0 else {}
    return SimMetrics(
        throughput_rate=float(tau_hat.sum()),
        throughput_stderr=float(thr_b.std(ddof=1) / math.sqrt(batches)),
        cost_rate=float((tau_hat * inst.costs).sum()),
        cost_stderr=float(cost_b.std(ddof=1) / math.sqrt(batches)),
        tau_hat=tau_hat,
        tau_stderr=tau_se,
        short_state_occupancy=occ_norm,
        long_empty_fraction=long_empty,
        buffer_time_avg=buffer_avg,
        buffer_batch_avgs=buffer_batches,
        event_count=events,
        supplier_accounting={
            "arrivals": arr_s,
            "matched": matched_s,
            "abandoned": abandoned_s,
            "discarded": discarded_s,
            "waiting": waiting,
        },
        customer_accounting={
            "arrivals": arr_c,
            "matched": matched_c,
            "unmatched": arr_c - matched_c,
        },
        cross_cell_matches=cross_cell,
        horizon=cfg.horizon,
        warmup=cfg.warmup,
        seed=cfg.seed,
        replications=1,
    )


# ---------------------------------------------------------------------------
# Checks derived from simulation output


def check_short_convergence(metrics: SimMetrics, nlp) -> float:
    """Total-variation distance between the empirical short-state distribution
    and the Network LP marginals."""
    marg = nlp.short_marginals()
    states = set(metrics.short_state_occupancy) | set(marg)
    tv = 0.0
    for s in states:
        tv += abs(metrics.short_state_occupancy.get(s, 0.0) - marg.get(s, 0.0))
    return 0.5 * tv


@dataclass(frozen=True)
class StabilityVerdict:
    passed: bool
    horizons: tuple[float, ...]
    averages: tuple[float, ...]
    threshold: float
    vacuous: bool = False


def check_buffer_stability(metrics_seq: list[SimMetrics]) -> StabilityVerdict:
    """PASS iff total virtual-buffer time-averages show no monotone growth
    across doubling horizons (slope against log-horizon within noise)."""
    if len(metrics_seq) < 3:
        raise InvalidInstance("need metrics at >= 3 doubling horizons")
    horizons = tuple(m.horizon for m in metrics_seq)
    avgs = tuple(float(sum(m.buffer_time_avg.values())) for m in metrics_seq)
    if all(a == 0.0 for a in avgs):
        return StabilityVerdict(True, horizons, avgs, 0.0, vacuous=True)
    ses = []
    for m in metrics_seq:
        b = m.buffer_batch_avgs
        ses.append(float(b.std(ddof=1) / math.sqrt(b.size)) if b.size > 1 else 0.0)
    x = np.log2(np.array(horizons))
    ybar = np.array(avgs)
    slope = float(np.polyfit(x, ybar, 1)[0])
    threshold = 3.0 * max(max(ses), 0.02 * max(avgs), 1e-9)
    return StabilityVerdict(slope <= threshold, horizons, avgs, threshold)

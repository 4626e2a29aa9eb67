"""Bandwidth-bounded bulk primitives: sort, one-per-machine sort,
grouped aggregation, prefix sums, and grouped prefix sums.

All five ops ride one engine, a splitter-based bucket sort:

1.  Each machine sorts its local records and sends a small regular
    sample up a two-hop gather tree; the root picks evenly spaced
    splitters and floods them down a shallow broadcast tree.
2.  Records are routed to the sub-team owning their splitter interval
    (recursing while a level's team spans more than one machine; the
    recursion depth is driven entirely by how many splitters fit in S).
3.  Leaf buckets are asserted against the bucket capacity, then either
    repacked into a contiguous layout (sort variants) or folded in
    place (aggregate / prefix variants) with a boundary-summary sweep
    up and down the gather tree, followed by one reply round to the
    records' origin machines.

Records always carry their origin (machine, slot), which both breaks
key ties (making the order total, so equal keys cannot concentrate in
one bucket) and addresses the reply round.  Capacities are expressed in
words: a record costs ``key_width + payload_width + 2`` words on the
wire, and the canonical geometry scales S with that record width so
that every send, receive, and bucket bound holds uniformly.

Bucket overflow is a detectable engine failure (the sampling resolution
was too coarse for the input), never silent: it raises
``BucketOverflow`` before any budget is breached.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from fractions import Fraction
from math import isqrt

from .executors import ExecResult, MpcExecutor
from .runtime import Message, SimulationError, SpecError
from .words import WORD_MAX

C_SLACK = 4  # bucket capacity multiplier over the mean bucket size
C_ROOM = 6  # S multiplier: a full bucket plus resident splitter/sample lists
C_HEAD = 8  # bookkeeping headroom added to S, in record units

HALF = Fraction(1, 2)


class BucketOverflow(SimulationError):
    pass


def ceil_power(k: int, expo: Fraction) -> int:
    """Exact ceil(k**expo) for rational expo >= 0."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    if k == 0:
        return 0
    p, q = expo.numerator, expo.denominator
    if p < 0:
        raise ValueError("exponent must be nonnegative")
    target = k**p
    # Smallest t with t**q >= k**p.
    t = round(target ** (1.0 / q)) if q > 1 else target
    t = max(t, 1)
    while t**q >= target:
        t -= 1
    t += 1
    while t**q < target:
        t += 1
    return t


@dataclass(frozen=True)
class Geometry:
    k: int
    M: int
    S: int
    bucket_cap: int
    record_w: int

    def describe(self) -> dict:
        return {
            "k": self.k,
            "M": self.M,
            "S": self.S,
            "bucket_cap": self.bucket_cap,
            "record_w": self.record_w,
        }


def canonical_geometry(
    k: int, delta: Fraction, key_width: int = 1, payload_width: int = 0
) -> Geometry:
    """M = ceil(k^(1-delta)) machines, bucket capacity 4*ceil(k^delta)
    items, and S sized for that many records plus headroom."""
    if not (0 < delta < 1):
        raise SpecError(f"delta must be in (0,1), got {delta}")
    w = key_width + payload_width + 2
    cap = ceil_power(k, delta)
    M = max(1, ceil_power(k, 1 - delta))
    bucket_cap = max(1, C_SLACK * cap)
    S = (C_ROOM * cap + C_HEAD) * w
    return Geometry(k=k, M=M, S=S, bucket_cap=bucket_cap, record_w=w)


def _wpick(samples: list, cnt: int) -> list:
    """Downsample a sorted list of weighted samples (key, om, os, wt) to at
    most cnt entries.  Each surviving sample is the weighted median of one
    equal-weight chunk and carries the chunk's total weight, so quantile
    positions computed downstream stay honest instead of drifting with
    every downsampling hop."""
    if len(samples) <= cnt:
        return list(samples)
    W = sum(s[3] for s in samples)
    chunks = [[] for _ in range(cnt)]
    acc = 0
    for s in samples:
        j = ((2 * acc + s[3]) * cnt) // (2 * W)
        chunks[min(j, cnt - 1)].append(s)
        acc += s[3]
    out = []
    for ch in chunks:
        if not ch:
            continue
        tot = sum(s[3] for s in ch)
        run = 0
        rep = ch[-1]
        for s in ch:
            run += s[3]
            if 2 * run >= tot:
                rep = s
                break
        out.append((rep[0], rep[1], rep[2], tot))
    return out


def _wsplit(pool: list, cnt: int) -> list:
    """cnt-1 bucket boundaries: the samples covering the j/cnt weighted
    quantiles of the pool (duplicates simply leave a bucket empty)."""
    W = sum(s[3] for s in pool)
    out = []
    i = 0
    acc = 0
    for j in range(1, cnt):
        while i < len(pool) - 1 and (acc + pool[i][3]) * cnt <= W * j:
            acc += pool[i][3]
            i += 1
        out.append(pool[i][:3])
    return out


def _heap_depth(ri: int, A: int) -> int:
    d = 0
    while ri > 0:
        ri = (ri - 1) // A
        d += 1
    return d


def _heap_children(ri: int, A: int, T: int) -> list[int]:
    lo = ri * A + 1
    return list(range(lo, min(lo + A, T)))


class _Acc:
    """Value accumulator for the fold modes."""

    OPS = ("sum", "count", "min", "max", "union")

    def __init__(self, op: str, union_cap: int | None = None):
        if op not in self.OPS:
            raise SpecError(f"unknown aggregate op {op!r}")
        if op == "union":
            if not union_cap or union_cap < 1:
                raise SpecError("union aggregation needs union_cap >= 1")
            self.res_w = 1 + union_cap
        else:
            self.res_w = 1
        self.op = op
        self.union_cap = union_cap

    def init(self, value: int):
        if self.op == "count":
            return 1
        if self.op == "union":
            return (value,)
        return value

    def combine(self, a, b):
        if a is None:
            return b
        if b is None:
            return a
        op = self.op
        if op in ("sum", "count"):
            s = a + b
            if s > WORD_MAX:
                raise SpecError("aggregate overflow: sum exceeds the word range")
            return s
        if op == "min":
            return a if a <= b else b
        if op == "max":
            return a if a >= b else b
        merged = tuple(sorted(set(a) | set(b)))
        if len(merged) > self.union_cap:
            raise SpecError(
                f"union capacity exceeded: {len(merged)} distinct values > {self.union_cap}"
            )
        return merged

    def encode(self, acc) -> tuple:
        if self.op == "union":
            return (len(acc),) + tuple(acc) + (0,) * (self.union_cap - len(acc))
        return (acc,)

    def decode(self, words):
        if self.op == "union":
            return tuple(words[1 : 1 + words[0]])
        return words[0]


# Boundary summary of one machine's (or span's) sorted records:
# (present, all one group, leftmost group+acc, rightmost group+acc,
# leftmost/rightmost full key for duplicate detection).
@dataclass
class _Summary:
    has: int
    same: int
    lg: tuple
    lacc: object
    rg: tuple
    racc: object
    lkey: tuple
    rkey: tuple

    @staticmethod
    def empty(gw, kw):
        z = (0,) * gw
        zk = (0,) * kw
        return _Summary(0, 0, z, None, z, None, zk, zk)


class _Engine:
    """One configured instance of the shared bucket-sort engine.

    mode: "sort" | "one_to_one" | "agg" | "prefix" | "gprefix".
    """

    def __init__(
        self,
        mode: str,
        geo: Geometry,
        key_width: int,
        payload_width: int,
        acc: _Acc | None = None,
        check_dup_keys: bool = False,
        executor=None,
    ):
        self.mode = mode
        self.geo = geo
        self.kw = key_width
        self.pw = payload_width
        self.w = key_width + payload_width + 2
        self.swire = key_width + 1
        self.acc = acc
        self.check_dup = check_dup_keys
        if mode == "agg":
            self.gw = key_width
        elif mode == "gprefix":
            self.gw = 1
        elif mode == "prefix":
            self.gw = 0
        else:
            self.gw = None
        self.M = geo.M
        self.S = geo.S
        if self.S < 2 * self.w:
            raise SpecError(f"capacity shortfall: S={self.S} below two records ({2 * self.w})")
        if geo.bucket_cap * self.w > self.S:
            raise SpecError(
                f"capacity shortfall: bucket of {geo.bucket_cap} records "
                f"({geo.bucket_cap * self.w} words) does not fit in S={self.S}"
            )
        self.cap_rec = self.S // self.w
        self.M_phys = max(self.M, geo.k) if mode == "one_to_one" else self.M
        self.counts_tree = False
        # Samples travel as key words plus one word packing origin machine
        # (24 bits), origin slot (16 bits) and weight (24 bits).
        if (
            geo.k >= 1 << 24
            or self.M_phys >= 1 << 24
            or max(geo.bucket_cap, self.cap_rec) >= 1 << 16
        ):
            raise SpecError(
                "capacity shortfall: instance too large for the packed sample encoding"
            )
        self.s_rate = max(1, (geo.k - 1).bit_length())

        # --- per-level structure and round schedule -----------------------
        self.levels = []
        self.team_of = []  # per level: list of (lo, hi) indexed by machine
        bounds = [(0, self.M)]
        size = self.M
        t = 1
        if mode == "one_to_one":
            t = 2  # round 1 redistributes one-per-machine inputs
        sched = {}
        # A machine may hold a full bucket of records while it also stages
        # sample lists or the splitter block, so those extras must fit in
        # the words left above the bucket.
        resident = self.S - geo.bucket_cap * self.w
        L_resid = (resident - 1) // self.swire
        cap_eq = max(1, geo.bucket_cap // C_SLACK)
        while size > 1:
            B = max(
                2,
                min(size, cap_eq + 2, self.S // (2 * self.w), self.S // (4 * self.swire)),
            )
            A_up = max(2, isqrt(size - 1) + 1)
            G = -(-size // A_up)
            # Sample lists travel as (count, *samples): budget the count
            # word too so a gatherer's A_up lists (and the root's G
            # lists) stay within S.
            L_mem = min((self.S // A_up - 1) // self.swire, L_resid)
            L_gath = min((self.S // G - 1) // self.swire, L_resid)
            if L_mem < 1 or L_gath < 1:
                raise SpecError(
                    f"capacity shortfall: S={self.S} cannot carry samples for "
                    f"a team of {size} machines"
                )
            block = (B - 1) * self.swire + 1
            if 2 * block > self.S or block > resident:
                raise SpecError(
                    f"capacity shortfall: S={self.S} cannot broadcast {B - 1} splitters"
                )
            A_down = max(2, self.S // block)
            D = _heap_depth(size - 1, A_down)
            lv = {
                "start": t,
                "B": B,
                "A_up": A_up,
                "L_mem": L_mem,
                "L_gath": L_gath,
                "A_down": A_down,
                "D": D,
                "route": t + 2 + D,
            }
            self.levels.append(lv)
            team_map = [None] * self.M
            for lo, hi in bounds:
                for i in range(lo, hi):
                    team_map[i] = (lo, hi)
            self.team_of.append(team_map)
            new_bounds = []
            for lo, hi in bounds:
                for sl, sh in self._subteams(lo, hi, B):
                    new_bounds.append((sl, sh))
            bounds = new_bounds
            for rr in range(t, t + 3 + D):
                sched[rr] = ("level", len(self.levels) - 1)
            size = max(hi - lo for lo, hi in bounds)
            t = t + 3 + D
        self.leaf_round = t

        # Global two-hop tree used for counts and fold summaries.
        self.A_fin = max(1, isqrt(max(self.M - 1, 0)) + 1) if self.M > 1 else 1
        self.G_fin = -(-self.M // self.A_fin)

        if mode in ("sort", "one_to_one"):
            if self.M == 1:
                sched[t] = ("solo", 0)
                total = t
            else:
                self.counts_tree = self.M > self.S // 2
                if self.counts_tree:
                    if self.G_fin > self.S or self.A_fin > self.S:
                        raise SpecError(
                            f"capacity shortfall: S={self.S} too small for the "
                            f"count tree over {self.M} machines"
                        )
                    names = [
                        "leaf_counts_up",
                        "counts_root",
                        "offs_gath",
                        "offs_member",
                        "reloc",
                        "place",
                    ]
                else:
                    names = ["leaf_counts", "reloc", "place"]
                if mode == "one_to_one":
                    names.append("spread_arrive")
                for j, nm in enumerate(names):
                    sched[t + j] = (nm, 0)
                total = t + len(names) - 1
        else:
            if self.acc is None:
                raise SpecError("fold modes need an accumulator")
            self.sum_w = 2 + 2 * self.gw + 2 * self.acc.res_w + 2 * self.kw
            if self.M > 1:
                if self.A_fin * self.sum_w > self.S or self.G_fin * self.sum_w > self.S:
                    raise SpecError(
                        f"capacity shortfall: S={self.S} too small for boundary "
                        f"summaries of width {self.sum_w} over {self.M} machines"
                    )
            if 1 + self.acc.res_w > self.S:
                raise SpecError("capacity shortfall: a single reply exceeds S")
            if self.M == 1:
                sched[t] = ("solo", 0)
                total = t
            else:
                names = ["leaf_fold", "fold_gather", "fold_root", "fold_down", "fold_reply", "fold_emit"]
                for j, nm in enumerate(names):
                    sched[t + j] = (nm, 0)
                total = t + len(names) - 1
        if mode == "one_to_one":
            sched[1] = ("prespread", 0)
        self.sched = sched
        self.total_rounds = total
        self.executor = executor if executor is not None else MpcExecutor(self.M_phys, self.S)

    # --- static structure helpers ----------------------------------------

    @staticmethod
    def _subteams(lo: int, hi: int, B: int) -> list[tuple[int, int]]:
        T = hi - lo
        Bp = min(B, T)
        q, rem = divmod(T, Bp)
        out = []
        at = lo
        for j in range(Bp):
            sz = q + (1 if j < rem else 0)
            out.append((at, at + sz))
            at += sz
        return out

    def _fold_group(self, idx: int) -> tuple[int, int, int]:
        """(gatherer, span_lo, span_hi) in the global two-hop tree."""
        g = (idx // self.A_fin) * self.A_fin
        return g, g, min(g + self.A_fin, self.M)

    # --- record (de)serialization -----------------------------------------

    def _parse(self, flat) -> list:
        w, kw = self.w, self.kw
        out = []
        for i in range(0, len(flat), w):
            out.append(
                (
                    tuple(flat[i : i + kw]),
                    flat[i + kw],
                    flat[i + kw + 1],
                    tuple(flat[i + kw + 2 : i + w]),
                )
            )
        return out

    def _flat(self, recs: list) -> tuple:
        out = []
        for key, om, os_, pay in recs:
            out.extend(key)
            out.append(om)
            out.append(os_)
            out.extend(pay)
        return tuple(out)

    def _parse_samples(self, flat) -> list:
        sw, kw = self.swire, self.kw
        cnt = flat[0]
        out = []
        i = 1
        for _ in range(cnt):
            packed = flat[i + kw]
            out.append(
                (
                    tuple(flat[i : i + kw]),
                    packed >> 40,
                    (packed >> 24) & 0xFFFF,
                    packed & 0xFFFFFF,
                )
            )
            i += sw
        return out

    def _flat_samples(self, samps: list) -> tuple:
        out = [len(samps)]
        for key, om, os_, wt in samps:
            out.extend(key)
            out.append((om << 40) | (os_ << 24) | wt)
        return tuple(out)

    # --- summaries ---------------------------------------------------------

    def _enc_sum(self, s: _Summary) -> tuple:
        a = self.acc
        z = (0,) * a.res_w
        return (
            (s.has, s.same)
            + tuple(s.lg)
            + (a.encode(s.lacc) if s.lacc is not None else z)
            + tuple(s.rg)
            + (a.encode(s.racc) if s.racc is not None else z)
            + tuple(s.lkey)
            + tuple(s.rkey)
        )

    def _dec_sum(self, flat, i=0) -> _Summary:
        gw, kw, rw = self.gw, self.kw, self.acc.res_w
        has = flat[i]
        same = flat[i + 1]
        j = i + 2
        lg = tuple(flat[j : j + gw]); j += gw
        lacc = self.acc.decode(flat[j : j + rw]) if has else None; j += rw
        rg = tuple(flat[j : j + gw]); j += gw
        racc = self.acc.decode(flat[j : j + rw]) if has else None; j += rw
        lkey = tuple(flat[j : j + kw]); j += kw
        rkey = tuple(flat[j : j + kw])
        return _Summary(has, same, lg, lacc, rg, racc, lkey, rkey)

    def _group_of(self, key: tuple) -> tuple:
        return key[: self.gw] if self.gw else ()

    def _summarize(self, recs: list) -> _Summary:
        gw, kw = self.gw, self.kw
        if not recs:
            return _Summary.empty(gw, kw)
        a = self.acc
        lg = self._group_of(recs[0][0])
        rg = self._group_of(recs[-1][0])
        if self.mode == "prefix":
            # One global group: both edge accumulators carry the span total.
            tot = None
            for rec in recs:
                tot = a.combine(tot, a.init(rec[3][0]))
            return _Summary(1, 1, lg, tot, rg, tot, recs[0][0], recs[-1][0])
        lacc = racc = None
        for rec in recs:
            if self._group_of(rec[0]) != lg:
                break
            lacc = a.combine(lacc, a.init(rec[3][0]))
        for rec in reversed(recs):
            if self._group_of(rec[0]) != rg:
                break
            racc = a.combine(racc, a.init(rec[3][0]))
        same = 1 if lg == rg else 0
        if same:
            # lacc already covers the whole span.
            racc = lacc
        return _Summary(1, same, lg, lacc, rg, racc, recs[0][0], recs[-1][0])

    def _merge_sum(self, left: _Summary, right: _Summary) -> _Summary:
        if not left.has:
            return right
        if not right.has:
            return left
        if self.check_dup and left.rkey == right.lkey:
            raise SpecError(f"duplicate key {left.rkey} in prefix input")
        a = self.acc
        if self.mode == "prefix":
            tot = a.combine(left.lacc, right.lacc)
            return _Summary(1, 1, left.lg, tot, right.rg, tot, left.lkey, right.rkey)
        lacc = left.lacc
        if left.same and right.lg == left.lg:
            lacc = a.combine(lacc, right.lacc)
        racc = right.racc
        if right.same and left.rg == right.rg:
            racc = a.combine(left.racc, racc)
        same = 1 if (left.same and right.same and left.lg == right.lg) else 0
        return _Summary(1, same, left.lg, lacc, right.rg, racc, left.lkey, right.rkey)

    def _chain(self, sums: list[_Summary]) -> _Summary:
        out = _Summary.empty(self.gw or 0, self.kw)
        for s in sums:
            out = self._merge_sum(out, s)
        return out

    def _exts(self, sums: list[_Summary]) -> list:
        """Per element: ((lg, lacc) from the left, (rg, racc) from the
        right), either possibly None."""
        a = self.acc
        m = len(sums)
        res = []
        for i, s in enumerate(sums):
            if not s.has:
                res.append((None, None))
                continue
            lacc = None
            j = i - 1
            while j >= 0:
                t = sums[j]
                if not t.has:
                    j -= 1
                    continue
                if t.rg != s.lg:
                    break
                lacc = a.combine(t.racc, lacc)
                if not t.same:
                    break
                j -= 1
            racc = None
            j = i + 1
            while j < m:
                t = sums[j]
                if not t.has:
                    j += 1
                    continue
                if t.lg != s.rg:
                    break
                racc = a.combine(racc, t.lacc)
                if not t.same:
                    break
                j += 1
            res.append(
                (
                    (s.lg, lacc) if lacc is not None else None,
                    (s.rg, racc) if racc is not None else None,
                )
            )
        return res

    def _enc_ext(self, ext) -> tuple:
        a = self.acc
        gw = self.gw
        z = (0,) * gw
        zz = (0,) * a.res_w
        l, r = ext
        out = (1 if l else 0,) + (tuple(l[0]) if l else z) + (a.encode(l[1]) if l else zz)
        out += (1 if r else 0,) + (tuple(r[0]) if r else z) + (a.encode(r[1]) if r else zz)
        return out

    def _dec_ext(self, flat):
        a = self.acc
        gw, rw = self.gw, a.res_w
        lh = flat[0]
        lg = tuple(flat[1 : 1 + gw])
        lacc = a.decode(flat[1 + gw : 1 + gw + rw])
        i = 1 + gw + rw
        rh = flat[i]
        rg = tuple(flat[i + 1 : i + 1 + gw])
        racc = a.decode(flat[i + 1 + gw : i + 1 + gw + rw])
        return ((lg, lacc) if lh else None, (rg, racc) if rh else None)

    def _virtual(self, side) -> _Summary:
        if side is None:
            return _Summary.empty(self.gw, self.kw)
        g, acc = side
        # A virtual neighbor: one uniform group carrying the external
        # contribution; keys are never inspected on virtual entries.
        zk = (0,) * self.kw
        return _Summary(1, 1, g, acc, g, acc, zk, zk)

    # --- program ----------------------------------------------------------

    def program(self):
        return _EngineProgram(self)

    def run(self, machine_inputs: list[tuple]) -> ExecResult:
        # The initial distribution counts as a bucket: it must respect the
        # same per-machine item cap every later phase is held to.
        cap_words = min(self.S, self.geo.bucket_cap * self.w) if self.M > 1 else self.S
        for i, words in enumerate(machine_inputs):
            if len(words) > cap_words:
                raise SpecError(
                    f"machine {i} input of {len(words)} words exceeds "
                    f"the per-machine budget {cap_words}"
                )
        return self.executor.run(self.program(), machine_inputs, self.total_rounds + 2)


class _EngineProgram:
    def __init__(self, eng: _Engine):
        self.e = eng

    def step(self, r, state, inbox, env):
        e = self.e
        idx = env.index
        if r == 1:
            state = (tuple(state), (), (), ())
        action = e.sched.get(r)
        if action is None:
            return state, [], (), False
        name, lvl = action
        halt_round = r == e.total_rounds
        if name == "prespread":
            out = self._prespread(idx, state)
        elif name == "level":
            out = self._level(r, idx, state, inbox, lvl)
        elif name == "solo":
            out = self._solo(idx, state)
        elif name in ("leaf_counts", "leaf_counts_up"):
            out = self._leaf_pack(idx, state, inbox, tree=name == "leaf_counts_up")
        elif name == "counts_root":
            out = self._counts_root(idx, state, inbox)
        elif name == "offs_gath":
            out = self._offs_gath(idx, state, inbox)
        elif name == "offs_member":
            out = self._offs_member(idx, state, inbox)
        elif name == "reloc":
            out = self._reloc(idx, state, inbox)
        elif name == "place":
            out = self._place(idx, state, inbox)
        elif name == "spread_arrive":
            out = self._spread_arrive(idx, state, inbox)
        elif name == "leaf_fold":
            out = self._leaf_fold(idx, state, inbox)
        elif name == "fold_gather":
            out = self._fold_gather(idx, state, inbox)
        elif name == "fold_root":
            out = self._fold_root(idx, state, inbox)
        elif name == "fold_down":
            out = self._fold_down(idx, state, inbox)
        elif name == "fold_reply":
            out = self._fold_reply(idx, state, inbox)
        elif name == "fold_emit":
            out = self._fold_emit(idx, state, inbox)
        else:  # pragma: no cover
            raise AssertionError(name)
        st, msgs, frag = out
        return st, msgs, frag, halt_round

    # -- helpers

    @staticmethod
    def _concat(inbox) -> tuple:
        if not inbox:
            return ()
        if len(inbox) == 1:
            return inbox[0].payload
        return tuple(w for m in inbox for w in m.payload)

    def _send_blocks(self, idx, blocks: dict) -> list:
        msgs = []
        for dst in sorted(blocks):
            payload = blocks[dst]
            if payload:
                msgs.append(Message(idx, dst, tuple(payload)))
        return msgs

    # -- phases

    def _prespread(self, idx, state):
        e = self.e
        recs = e._parse(state[0])
        blocks = {}
        for t, rec in enumerate(recs):
            tgt = (idx + t) % e.M
            blocks.setdefault(tgt, []).extend(e._flat([rec]))
        return ((), (), (), ()), self._send_blocks(idx, blocks), ()

    def _level(self, r, idx, state, inbox, lvl):
        e = self.e
        if idx >= e.M:
            return state, [], ()
        lv = e.levels[lvl]
        off = r - lv["start"]
        lo, hi = e.team_of[lvl][idx]
        T = hi - lo
        if off == 0:
            if lvl == 0 and e.mode != "one_to_one":
                flat = state[0]
            else:
                flat = self._concat(inbox)
            recs = e._parse(flat)
            recs.sort()
            flat = e._flat(recs)
            base = [(rec[0], rec[1], rec[2], 1) for rec in recs]
            samples = _wpick(base, min(e.s_rate, lv["L_mem"]))
            gav = lo + ((idx - lo) // lv["A_up"]) * lv["A_up"]
            msgs = []
            stash = ()
            if samples:
                enc = e._flat_samples(samples)
                if gav == idx:
                    stash = enc
                else:
                    msgs = [Message(idx, gav, enc)]
            return (flat, (), stash, ()), msgs, ()
        if off == 1:
            if (idx - lo) % lv["A_up"] != 0:
                return state, [], ()
            pool = []
            if state[2]:
                pool.extend(e._parse_samples(state[2]))
            for m in inbox:
                pool.extend(e._parse_samples(m.payload))
            pool.sort()
            down = _wpick(pool, lv["L_gath"])
            msgs = []
            stash = ()
            if down:
                enc = e._flat_samples(down)
                if lo == idx:
                    stash = enc
                else:
                    msgs = [Message(idx, lo, enc)]
            return (state[0], (), stash, ()), msgs, ()
        # Splitter pick / broadcast window / route.
        ri = idx - lo
        A_down = lv["A_down"]
        msgs = []
        spl_flat = state[1]
        if off == 2 and ri == 0:
            pool = []
            if state[2]:
                pool.extend(e._parse_samples(state[2]))
            for m in inbox:
                pool.extend(e._parse_samples(m.payload))
            pool.sort()
            Bp = min(lv["B"], T)
            spl = _wsplit(pool, Bp) if pool else []
            spl_flat = e._flat_samples([s + (0,) for s in spl])
            for c in _heap_children(ri, A_down, T):
                msgs.append(Message(idx, lo + c, spl_flat))
        elif inbox and not spl_flat:
            spl_flat = inbox[0].payload
            for c in _heap_children(ri, A_down, T):
                msgs.append(Message(idx, lo + c, spl_flat))
        if off < 2 + lv["D"]:
            return (state[0], spl_flat, (), ()), msgs, ()
        # Route round.
        spl = [s[:3] for s in e._parse_samples(spl_flat)] if spl_flat else []
        recs = e._parse(state[0])
        subs = e._subteams(lo, hi, lv["B"])
        blocks = {}
        rr = {}
        for rec in recs:
            triple = (rec[0], rec[1], rec[2])
            j = bisect.bisect_right(spl, triple)
            if j >= len(subs):
                j = len(subs) - 1
            sl, sh = subs[j]
            sz = sh - sl
            c = rr.get(j, 0)
            rr[j] = c + 1
            tgt = sl + ((idx - lo) + c) % sz
            blocks.setdefault(tgt, []).extend(e._flat([rec]))
        return ((), (), (), ()), msgs + self._send_blocks(idx, blocks), ()

    def _arrived_sorted(self, idx, inbox):
        e = self.e
        recs = e._parse(self._concat(inbox))
        recs.sort()
        if len(recs) > e.geo.bucket_cap:
            raise BucketOverflow(
                f"bucket of {len(recs)} records on machine {idx} exceeds the "
                f"capacity {e.geo.bucket_cap}; the sample resolution was too "
                f"coarse for this input"
            )
        return recs

    def _solo(self, idx, state):
        e = self.e
        recs = e._parse(state[0])
        recs.sort()
        if e.mode in ("sort", "one_to_one"):
            return ((), (), (), ()), [], (len(recs),) + e._flat(recs)
        if e.check_dup:
            for a_, b_ in zip(recs, recs[1:]):
                if a_[0] == b_[0]:
                    raise SpecError(f"duplicate key {a_[0]} in prefix input")
        results = self._local_results(recs, None, None)
        frag = []
        for rec, res in zip(recs, results):
            frag.append(rec[2])
            frag.extend(e.acc.encode(res))
        return ((), (), (), ()), [], tuple(frag)

    def _leaf_pack(self, idx, state, inbox, tree: bool):
        e = self.e
        if idx >= e.M:
            return state, [], ()
        recs = self._arrived_sorted(idx, inbox)
        flat = e._flat(recs)
        cnt = len(recs)
        if tree:
            gav, _, _ = e._fold_group(idx)
            if gav == idx:
                return (flat, (), (cnt,), ()), [], ()
            return (flat, (), (), ()), [Message(idx, gav, (cnt,))], ()
        msgs = [Message(idx, j, (cnt,)) for j in range(e.M) if j != idx]
        return (flat, (), (cnt,), ()), msgs, ()

    def _counts_root(self, idx, state, inbox):
        e = self.e
        gav, glo, ghi = e._fold_group(idx)
        if gav != idx:
            return state, [], ()
        counts = {}
        if state[2]:
            counts[idx] = state[2][0]
        for m in inbox:
            counts[m.src] = m.payload[0]
        ordered = tuple(counts.get(j, 0) for j in range(glo, ghi))
        total = sum(ordered)
        msgs = [] if idx == 0 else [Message(idx, 0, (total,))]
        if idx == 0:
            return (state[0], (), ordered, (total,)), [], ()
        return (state[0], (), ordered, ()), msgs, ()

    def _offs_gath(self, idx, state, inbox):
        e = self.e
        if idx != 0:
            return state, [], ()
        totals = {}
        if state[3]:
            totals[0] = state[3][0]
        for m in inbox:
            totals[m.src] = m.payload[0]
        gathers = list(range(0, e.M, e.A_fin))
        msgs = []
        at = 0
        own = ()
        for g in gathers:
            tot = totals.get(g, 0)
            if g == 0:
                own = (at,)
            else:
                msgs.append(Message(idx, g, (at,)))
            at += tot
        return (state[0], (), state[2], own), msgs, ()

    def _offs_member(self, idx, state, inbox):
        e = self.e
        gav, glo, ghi = e._fold_group(idx)
        if gav != idx:
            return state, [], ()
        base = state[3][0] if state[3] else inbox[0].payload[0]
        counts = state[2]
        msgs = []
        at = base
        own = ()
        for j, c in zip(range(glo, ghi), counts):
            if j == idx:
                own = (at,)
            else:
                msgs.append(Message(idx, j, (at,)))
            at += c
        return (state[0], (), (), own), msgs, ()

    def _reloc(self, idx, state, inbox):
        e = self.e
        if idx >= e.M:
            return state, [], ()
        if e.counts_tree:
            off = state[3][0] if state[3] else inbox[0].payload[0]
        else:
            counts = {}
            if state[2]:
                counts[idx] = state[2][0]
            for m in inbox:
                counts[m.src] = m.payload[0]
            off = sum(counts.get(j, 0) for j in range(idx))
        recs = e._parse(state[0])
        blocks = {}
        for t, rec in enumerate(recs):
            g = off + t
            tgt = g // e.cap_rec
            blocks.setdefault(tgt, []).extend(e._flat([rec]))
        return ((), (), (), ()), self._send_blocks(idx, blocks), ()

    def _place(self, idx, state, inbox):
        e = self.e
        if idx >= e.M:
            return state, [], ()
        flat = self._concat(inbox)
        if e.mode == "sort":
            cnt = len(flat) // e.w
            return ((), (), (), ()), [], (cnt,) + tuple(flat)
        # one_to_one: fan each record out to its rank machine.
        recs = e._parse(flat)
        base = e.cap_rec * idx
        msgs = []
        for t, rec in enumerate(recs):
            msgs.append(Message(idx, base + t, tuple(e._flat([rec]))))
        return ((), (), (), ()), msgs, ()

    def _spread_arrive(self, idx, state, inbox):
        flat = self._concat(inbox)
        return ((), (), (), ()), [], tuple(flat)

    # -- fold phases

    def _local_results(self, recs, ext_l, ext_r):
        """Final per-record values given external boundary contributions."""
        e = self.e
        a = e.acc
        if e.mode in ("prefix", "gprefix"):
            results = []
            run = None
            prev_g = None
            first_group = e._group_of(recs[0][0]) if recs else None
            for rec in recs:
                g = e._group_of(rec[0])
                if g != prev_g:
                    run = None
                    if g == first_group and ext_l is not None and ext_l[0] == g:
                        run = ext_l[1]
                    prev_g = g
                run = a.combine(run, a.init(rec[3][0]))
                results.append(run)
            return results
        # Aggregate: group totals with boundary extensions.
        totals = {}
        for rec in recs:
            g = e._group_of(rec[0])
            totals[g] = a.combine(totals.get(g), a.init(rec[3][0]))
        if recs:
            lg = e._group_of(recs[0][0])
            rg = e._group_of(recs[-1][0])
            if ext_l is not None and ext_l[0] == lg:
                totals[lg] = a.combine(ext_l[1], totals[lg])
            if ext_r is not None and ext_r[0] == rg:
                totals[rg] = a.combine(totals[rg], ext_r[1])
        return [totals[e._group_of(rec[0])] for rec in recs]

    def _leaf_fold(self, idx, state, inbox):
        e = self.e
        if idx >= e.M:
            return state, [], ()
        recs = self._arrived_sorted(idx, inbox)
        if e.check_dup:
            for a_, b_ in zip(recs, recs[1:]):
                if a_[0] == b_[0]:
                    raise SpecError(f"duplicate key {a_[0]} in prefix input")
        flat = e._flat(recs)
        summ = e._enc_sum(e._summarize(recs))
        gav, _, _ = e._fold_group(idx)
        if gav == idx:
            return (flat, (), summ, ()), [], ()
        return (flat, (), (), ()), [Message(idx, gav, summ)], ()

    def _fold_gather(self, idx, state, inbox):
        e = self.e
        gav, glo, ghi = e._fold_group(idx)
        if idx >= e.M or gav != idx:
            return state, [], ()
        per = {}
        if state[2]:
            per[idx] = e._dec_sum(state[2])
        for m in inbox:
            per[m.src] = e._dec_sum(m.payload)
        members = list(range(glo, ghi))
        sums = [per.get(j, _Summary.empty(e.gw, e.kw)) for j in members]
        span = e._chain(sums)
        enc_members = tuple(w for s in sums for w in e._enc_sum(s))
        enc_span = e._enc_sum(span)
        if idx == 0:
            return (state[0], enc_members, enc_span, ()), [], ()
        return (state[0], enc_members, (), ()), [Message(idx, 0, enc_span)], ()

    def _fold_root(self, idx, state, inbox):
        e = self.e
        if idx != 0:
            return state, [], ()
        per = {}
        if state[2]:
            per[0] = e._dec_sum(state[2])
        for m in inbox:
            per[m.src] = e._dec_sum(m.payload)
        gathers = list(range(0, e.M, e.A_fin))
        sums = [per.get(g, _Summary.empty(e.gw, e.kw)) for g in gathers]
        e._chain(sums)  # runs duplicate detection across spans
        exts = e._exts(sums)
        msgs = []
        own = ()
        for g, ext in zip(gathers, exts):
            enc = e._enc_ext(ext)
            if g == 0:
                own = enc
            else:
                msgs.append(Message(idx, g, enc))
        return (state[0], state[1], (), own), msgs, ()

    def _fold_down(self, idx, state, inbox):
        e = self.e
        gav, glo, ghi = e._fold_group(idx)
        if idx >= e.M or gav != idx:
            return state, [], ()
        enc = state[3] if state[3] else (inbox[0].payload if inbox else None)
        span_ext = e._dec_ext(enc) if enc else (None, None)
        members = list(range(glo, ghi))
        sw = e.sum_w
        flat = state[1]
        sums = [e._dec_sum(flat, i * sw) for i in range(len(members))]
        chain = [e._virtual(span_ext[0])] + sums + [e._virtual(span_ext[1])]
        exts = e._exts(chain)[1:-1]
        msgs = []
        own = ()
        for j, ext in zip(members, exts):
            encj = e._enc_ext(ext)
            if j == idx:
                own = encj
            else:
                msgs.append(Message(idx, j, encj))
        return (state[0], (), (), own), msgs, ()

    def _fold_reply(self, idx, state, inbox):
        e = self.e
        if idx >= e.M:
            return state, [], ()
        enc = state[3] if state[3] else (inbox[0].payload if inbox else None)
        ext_l, ext_r = e._dec_ext(enc) if enc else (None, None)
        recs = e._parse(state[0])
        if not recs:
            return ((), (), (), ()), [], ()
        results = self._local_results(recs, ext_l, ext_r)
        blocks = {}
        for rec, res in zip(recs, results):
            blocks.setdefault(rec[1], []).extend((rec[2],) + e.acc.encode(res))
        return ((), (), (), ()), self._send_blocks(idx, blocks), ()

    def _fold_emit(self, idx, state, inbox):
        return ((), (), (), ()), [], self._concat(inbox)


# ---------------------------------------------------------------------------
# Public operations.


@dataclass
class OpResult:
    rounds: int
    trace: object
    geometry: Geometry
    values: object = None
    info: dict = field(default_factory=dict)


def _normalize_items(items, kw, pw):
    norm = []
    for it in items:
        key, pay = it
        if isinstance(key, int):
            key = (key,)
        if isinstance(pay, int):
            pay = (pay,)
        key = tuple(key)
        pay = tuple(pay)
        if len(key) != kw:
            raise SpecError(f"key {key} does not have width {kw}")
        if len(pay) != pw:
            raise SpecError(f"payload {pay} does not have width {pw}")
        for w_ in key + pay:
            if not isinstance(w_, int) or isinstance(w_, bool) or w_ < 0 or w_ > WORD_MAX:
                raise SpecError(f"value out of word range: {w_!r}")
        norm.append((key, pay))
    return norm


def _build_inputs(norm, eng: _Engine, placement=None):
    """Distribute items over machines; returns (inputs, origin_index)
    where origin_index maps (machine, slot) -> position in ``norm``."""
    M = eng.M_phys if eng.mode == "one_to_one" else eng.M
    per = [[] for _ in range(M)]
    origin = {}
    if placement is None:
        chunk = max(1, -(-len(norm) // M))
        for i, (key, pay) in enumerate(norm):
            om = i // chunk
            slot = i - om * chunk
            per[om].append(key + (om, slot) + pay)
            origin[(om, slot)] = i
    else:
        if len(placement) != M:
            raise SpecError(f"placement must list {M} machines")
        seen = 0
        for om, idxs in enumerate(placement):
            for slot, i in enumerate(idxs):
                key, pay = norm[i]
                per[om].append(key + (om, slot) + pay)
                origin[(om, slot)] = i
                seen += 1
        if seen != len(norm):
            raise SpecError("placement does not cover all items exactly once")
    inputs = [tuple(w for rec in mach for w in rec) for mach in per]
    return inputs, origin


def _finish(eng: _Engine, res: ExecResult, geo: Geometry) -> OpResult:
    return OpResult(
        rounds=res.rounds,
        trace=res.trace,
        geometry=geo,
        info=dict(res.info, total_schedule=eng.total_rounds),
    )


def mpc_sort(
    items,
    delta: Fraction = HALF,
    *,
    key_width: int = 1,
    payload_width: int = 0,
    geometry: Geometry | None = None,
    executor=None,
    placement=None,
) -> OpResult:
    """Sort (key, payload) items by key, ties broken by original
    position; returns the full sorted list plus the run record."""
    norm = _normalize_items(items, key_width, payload_width)
    geo = geometry or canonical_geometry(len(norm), delta, key_width, payload_width)
    eng = _Engine("sort", geo, key_width, payload_width, executor=executor)
    inputs, origin = _build_inputs(norm, eng, placement)
    res = eng.run(inputs)
    out = []
    for m in range(eng.M):
        flat = res.outputs.get(m, ())
        if not flat:
            continue
        cnt = flat[0]
        recs = eng._parse(flat[1:])
        if len(recs) != cnt:
            raise SpecError("malformed sort output")
        out.extend(recs)
    if len(out) != len(norm):
        raise SpecError(f"sort returned {len(out)} of {len(norm)} items")
    r = _finish(eng, res, geo)
    r.values = [(rec[0], rec[3]) for rec in out]
    return r


def mpc_sort_one_to_one(
    items,
    delta: Fraction = HALF,
    *,
    key_width: int = 1,
    payload_width: int = 0,
    geometry: Geometry | None = None,
    executor=None,
    placement=None,
) -> OpResult:
    """Sort with a one-record-per-machine result: the rank-r item ends
    on machine r.  Needs at least k machines."""
    norm = _normalize_items(items, key_width, payload_width)
    geo = geometry or canonical_geometry(len(norm), delta, key_width, payload_width)
    eng = _Engine("one_to_one", geo, key_width, payload_width, executor=executor)
    inputs, origin = _build_inputs(norm, eng, placement)
    res = eng.run(inputs)
    ranked = []
    for rank in range(len(norm)):
        flat = res.outputs.get(rank, ())
        if len(flat) != eng.w:
            raise SpecError(f"rank {rank} machine emitted {len(flat)} words, wanted {eng.w}")
        rec = eng._parse(flat)[0]
        ranked.append((rec[0], rec[3]))
    r = _finish(eng, res, geo)
    r.values = ranked
    return r


def _run_fold(mode, items, op, delta, key_width, union_cap, geometry, executor, placement):
    acc = _Acc(op, union_cap)
    norm = _normalize_items(items, key_width, 1)
    # Size S for the widest thing a record produces (its res_w-word
    # reply), not just the 1-word value it carries in.
    geo = geometry or canonical_geometry(len(norm), delta, key_width, acc.res_w)
    eng = _Engine(
        mode,
        geo,
        key_width,
        1,
        acc=acc,
        check_dup_keys=mode in ("prefix", "gprefix"),
        executor=executor,
    )
    inputs, origin = _build_inputs(norm, eng, placement)
    res = eng.run(inputs)
    results = [None] * len(norm)
    rw = acc.res_w
    for m in range(eng.M):
        flat = res.outputs.get(m, ())
        i = 0
        while i < len(flat):
            slot = flat[i]
            val = acc.decode(flat[i + 1 : i + 1 + rw])
            pos = origin.get((m, slot))
            if pos is None:
                raise SpecError("reply for unknown origin slot")
            results[pos] = val
            i += 1 + rw
    if any(v is None for v in results):
        raise SpecError("missing aggregation replies")
    r = _finish(eng, res, geo)
    r.values = results
    return r


def mpc_group_aggregate(
    pairs,
    op: str = "sum",
    delta: Fraction = HALF,
    *,
    key_width: int = 1,
    union_cap: int | None = None,
    geometry: Geometry | None = None,
    executor=None,
    placement=None,
) -> OpResult:
    """(group, value) pairs -> per input item, the op-total of its
    group.  Ops: sum, count, min, max, union (with union_cap)."""
    return _run_fold("agg", pairs, op, delta, key_width, union_cap, geometry, executor, placement)


def mpc_prefix_sum(
    pairs,
    delta: Fraction = HALF,
    *,
    geometry: Geometry | None = None,
    executor=None,
    placement=None,
) -> OpResult:
    """(index, value) pairs with distinct indices -> inclusive prefix
    sums in index order."""
    return _run_fold("prefix", pairs, "sum", delta, 1, None, geometry, executor, placement)


def mpc_group_prefix_sum(
    triples,
    delta: Fraction = HALF,
    *,
    geometry: Geometry | None = None,
    executor=None,
    placement=None,
) -> OpResult:
    """(group, index, value) items, (group, index) distinct -> inclusive
    prefix sums within each group, ordered by index."""
    items = [((g, i), v) for g, i, v in triples]
    return _run_fold("gprefix", items, "sum", delta, 2, None, geometry, executor, placement)

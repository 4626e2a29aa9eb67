"""Execution backends for machine-indexed (MPC-style) programs.

Higher layers (the sort engine, graph algorithms, cross-model
simulations) are written against M machines indexed 0..M-1 with a
per-machine word budget S.  An executor runs such a program either
directly under the MPC runtime or hosted on top of another model.

``BalancedNccExecutor`` hosts q = M/n consecutive machines on each of n
clique nodes.  One hosted round costs exactly two NCC rounds: at odd
rounds every node steps its machines and sends their traffic (node
capacity C = q*S covers the aggregate send), at even rounds the node
stages what arrived (again at most q*S words) for consumption in the
next hosted round.  Hosted-machine sub-addressing travels in the free
message metadata channel; per-machine S limits are enforced by the
wrapper so hosted programs see the same discipline as under direct MPC.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import runtime
from .runtime import (
    BandwidthViolation,
    Message,
    MemoryViolation,
    ModelSpec,
    RoundTrace,
    SpecError,
    Violation,
    mpc_spec,
)
from .words import words_in


@dataclass
class ExecResult:
    outputs: dict
    trace: RoundTrace
    rounds: int
    info: dict = field(default_factory=dict)


class MpcExecutor:
    """Runs machine programs directly under MPC(M, S)."""

    def __init__(self, M: int, S: int):
        self.M = M
        self.S = S

    def run(self, program, inputs, max_rounds: int) -> ExecResult:
        spec = mpc_spec(self.M, self.S)
        outputs, trace = runtime.run(spec, program, inputs, max_rounds)
        return ExecResult(outputs=outputs, trace=trace, rounds=trace.rounds)


class _InnerEnv:
    """MPC-shaped environment handed to hosted machine programs."""

    __slots__ = ("family", "index", "M", "S", "n", "me")

    def __init__(self, index, M, S):
        self.family = runtime.MPC
        self.index = index
        self.me = index
        self.M = M
        self.S = S
        self.n = M


def _encode_msgs(msgs: list) -> tuple:
    flat = []
    for src, payload in msgs:
        flat.append(src)
        flat.append(len(payload))
        flat.extend(payload)
    return tuple(flat)


def _decode_msgs(flat: tuple) -> list:
    out = []
    i = 0
    n = len(flat)
    while i < n:
        src = flat[i]
        ln = flat[i + 1]
        out.append((src, flat[i + 2 : i + 2 + ln]))
        i += 2 + ln
    return out


class _HostProgram:
    """NCC node program hosting q consecutive MPC machines."""

    def __init__(self, inner, M, S, q, rank_of, live_M=None):
        self.inner = inner
        self.M = M
        self.S = S
        self.q = q
        self.live_M = M if live_M is None else live_M
        self.rank_of = rank_of  # node id -> rank
        self.sorted_ids = sorted(rank_of, key=rank_of.get)
        self._measure_cache = {}

    def host_of(self, machine: int):
        return self.sorted_ids[machine // self.q]

    def step(self, r, state, inbox, env):
        q = self.q
        rank = self.rank_of[env.me]
        base = rank * q
        if r == 1:
            # Unpack per-machine inputs: (len, words...) * q.
            slots = []
            i = 0
            for _ in range(q):
                ln = state[i]
                slots.append((tuple(state[i + 1 : i + 1 + ln]), (), 0))
                i += 1 + ln
            state = tuple(slots)
        if r % 2 == 1:
            # Compute round: hosted round tau = (r + 1) // 2.
            tau = (r + 1) // 2
            new_slots = []
            remote = []
            local = []
            frags = []
            for j in range(q):
                inner_state, staged, halted = state[j]
                if halted:
                    new_slots.append(state[j])
                    continue
                mch = base + j
                msgs = tuple(
                    Message(src, mch, payload) for src, payload in _decode_msgs(staged)
                )
                ienv = _InnerEnv(mch, self.M, self.S)
                st, outbox, frag, halt = self.inner.step(tau, inner_state, msgs, ienv)
                sent = 0
                for m in outbox:
                    if not (0 <= m.dst < self.M):
                        raise runtime.AddressingViolation(
                            r, env.me, f"hosted machine {mch}: bad index {m.dst!r}"
                        )
                    sent += len(m.payload)
                    if base <= m.dst < base + q:
                        # Same host: moves within node memory, not on the
                        # clique wire; still delivered next hosted round.
                        local.append((m.dst - base, mch, m.payload))
                    else:
                        remote.append((mch, m.dst, m.payload))
                if sent > self.S:
                    rec = Violation(tau, mch, "send", sent, self.S)
                    raise BandwidthViolation(rec)
                hw = words_in(st, self._measure_cache)
                if hw > self.S:
                    rec = Violation(tau, mch, "state", hw, self.S)
                    raise MemoryViolation(rec)
                new_slots.append((st, (), 1 if halt else 0))
                if frag:
                    # Wrap so outputs can be re-attributed to machines.
                    frags.append((mch, len(frag)) + tuple(frag))
            for jt, src, payload in local:
                inner_state, staged, halted = new_slots[jt]
                if halted:
                    raise runtime.AddressingViolation(
                        r, env.me, f"hosted machine {base + jt} got mail after halting"
                    )
                new_slots[jt] = (inner_state, staged + _encode_msgs([(src, payload)]), halted)
            out_msgs = [
                Message(env.me, self.host_of(dst), payload, meta=(src, dst))
                for src, dst, payload in remote
            ]
            flat_frags = tuple(w for f in frags for w in f)
            # A node only halts on an even (stage) round, once every
            # hosted machine has halted and no mail is in flight.
            return tuple(new_slots), out_msgs, flat_frags, False
        else:
            # Stage round: distribute arrivals to hosted inboxes.
            per = {}
            for m in inbox:
                src, dst = m.meta
                j = dst - base
                if not (0 <= j < q):
                    raise runtime.AddressingViolation(r, env.me, "misrouted hosted message")
                per.setdefault(j, []).append((src, m.payload))
            new_slots = []
            for j in range(q):
                inner_state, staged, halted = state[j]
                add = per.get(j)
                if add:
                    if halted:
                        raise runtime.AddressingViolation(
                            r, env.me, f"hosted machine {base + j} got mail after halting"
                        )
                    staged = staged + _encode_msgs(add)
                total = sum(len(p) for _, p in _decode_msgs(staged))
                if total > self.S:
                    rec = Violation(r // 2 + 1, base + j, "receive", total, self.S)
                    raise BandwidthViolation(rec)
                new_slots.append((inner_state, staged, halted))
            all_halted = all(s[2] for s in new_slots)
            no_mail = not any(s[1] for s in new_slots)
            return tuple(new_slots), [], (), all_halted and no_mail


class BalancedNccExecutor:
    """Hosts an M-machine, S-word program on an NCC(C) clique of n nodes.

    Requires M to be a multiple of n (pad with idle machines if needed)
    and q*S <= C where q = M/n.
    """

    def __init__(self, ids, C: int, M: int, S: int):
        ids = tuple(sorted(ids))
        n = len(ids)
        if n == 0:
            raise SpecError("empty node set")
        if M % n != 0:
            raise SpecError(f"M={M} is not a multiple of n={n}; pad with idle machines")
        q = M // n
        if q * S > C:
            raise SpecError(
                f"capacity shortfall: hosting q={q} machines of S={S} words needs "
                f"q*S={q * S} <= C={C}"
            )
        self.ids = ids
        self.C = C
        self.M = M
        self.S = S
        self.q = q
        self.rank_of = {v: i for i, v in enumerate(ids)}

    def run(self, program, inputs, max_rounds: int) -> ExecResult:
        inputs = list(inputs)
        if len(inputs) != self.M:
            raise SpecError(f"expected {self.M} machine inputs, got {len(inputs)}")
        for i, words in enumerate(inputs):
            if len(words) > self.S:
                raise SpecError(f"machine {i} input of {len(words)} words exceeds S={self.S}")
        host = _HostProgram(program, self.M, self.S, self.q, self.rank_of)
        node_inputs = {}
        for rank, v in enumerate(self.ids):
            flat = []
            for j in range(self.q):
                words = inputs[rank * self.q + j]
                flat.append(len(words))
                flat.extend(words)
            node_inputs[v] = tuple(flat)
        spec = runtime.ncc_spec(self.C, self.ids)
        raw, trace = runtime.run(spec, host, node_inputs, 2 * max_rounds + 2)
        outputs = {i: [] for i in range(self.M)}
        for v in self.ids:
            flat = raw[v]
            i = 0
            while i < len(flat):
                mch, ln = flat[i], flat[i + 1]
                outputs[mch].extend(flat[i + 2 : i + 2 + ln])
                i += 2 + ln
        inner_rounds = (trace.rounds + 1) // 2
        return ExecResult(
            outputs={m: tuple(ws) for m, ws in outputs.items()},
            trace=trace,
            rounds=inner_rounds,
            info={"ncc_rounds": trace.rounds, "slowdown": 2},
        )

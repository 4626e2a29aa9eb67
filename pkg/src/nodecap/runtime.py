"""Synchronous round-based execution with hard budget enforcement.

Four model families share one runtime:

* ``MPC``    — M machines, S words of memory; per round each machine may
  send at most S words and receive at most S words (separate caps), and
  its state must fit in S words at round end.
* ``NCC``    — one machine per node, any-to-any messaging, sent+received
  at most C words per node per round (sum cap).  The full ID set is
  globally known.
* ``NCC0``   — NCC restricted to initial knowledge of neighbor IDs only;
  a node may only address IDs it has learned (initial neighbors, message
  senders, or ID-tagged payload words).
* ``NCCSTAR`` — NCC0 plus: state capped at C words, port-numbered access
  to neighbors (ports 1..deg), and an f_v oracle mapping learned IDs to
  ports.  Initial ID knowledge is empty; senders are anonymous (payload
  ID words are the only channel through which IDs travel).

Violations abort the run: the offending record is appended to the trace
and the corresponding exception is raised.  A round index is 1-based.
Messages sent in round r are delivered at the start of round r+1;
received words are charged to the delivery round.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .graphs import Graph
from .words import WORD_MAX, words_in

MPC = "MPC"
NCC = "NCC"
NCC0 = "NCC0"
NCCSTAR = "NCCSTAR"

FAMILIES = (MPC, NCC, NCC0, NCCSTAR)


class SimulationError(Exception):
    pass


class SpecError(SimulationError):
    """Invalid model spec, inputs, or operation preconditions."""


@dataclass
class Violation:
    round: int
    machine: object
    kind: str
    amount: int
    limit: int

    def as_dict(self) -> dict:
        return {
            "round": self.round,
            "machine": self.machine,
            "kind": self.kind,
            "amount": self.amount,
            "limit": self.limit,
        }


class BandwidthViolation(SimulationError):
    def __init__(self, record: Violation):
        self.record = record
        super().__init__(
            f"bandwidth violation: round {record.round}, machine {record.machine}, "
            f"{record.kind} {record.amount} > {record.limit}"
        )


class MemoryViolation(SimulationError):
    def __init__(self, record: Violation):
        self.record = record
        super().__init__(
            f"memory violation: round {record.round}, machine {record.machine}, "
            f"state {record.amount} > {record.limit}"
        )


class AddressingViolation(SimulationError):
    def __init__(self, round_, machine, detail: str):
        self.record = Violation(round_, machine, "addressing", 0, 0)
        super().__init__(
            f"addressing violation: round {round_}, machine {machine}: {detail}"
        )


class NonTermination(SimulationError):
    def __init__(self, max_rounds: int, live: list, diagnosis: str = ""):
        self.max_rounds = max_rounds
        self.live = live
        extra = f" ({diagnosis})" if diagnosis else ""
        super().__init__(
            f"no termination within {max_rounds} rounds; {len(live)} machines live{extra}"
        )


class DecodeError(SimulationError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    family: str
    n: int
    M: int | None = None
    S: int | None = None
    C: int | None = None
    ids: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown model family {self.family!r}")
        if self.family == MPC:
            if not self.M or self.M < 1 or not self.S or self.S < 1:
                raise SpecError("MPC requires M >= 1 and S >= 1")
        else:
            if not self.C or self.C < 1:
                raise SpecError(f"{self.family} requires C >= 1")
        if self.n < 0:
            raise SpecError("n must be nonnegative")

    def describe(self) -> dict:
        d = {"family": self.family, "n": self.n}
        if self.family == MPC:
            d.update(M=self.M, S=self.S)
        else:
            d.update(C=self.C)
        return d


def mpc_spec(M: int, S: int, n: int | None = None) -> ModelSpec:
    return ModelSpec(family=MPC, n=n if n is not None else M, M=M, S=S)


def ncc_spec(C: int, ids: tuple[int, ...], family: str = NCC) -> ModelSpec:
    return ModelSpec(family=family, n=len(ids), C=C, ids=tuple(sorted(ids)))


@dataclass(frozen=True)
class Message:
    src: object
    dst: object
    payload: tuple[int, ...]
    # Indices of payload words that carry node IDs.  The tag is
    # simulator bookkeeping (knowledge tracking) and costs no bandwidth.
    id_flags: tuple[int, ...] = ()
    # Free-form metadata excluded from all budgets.  Used by simulation
    # wrappers for sub-addressing (e.g. hosted-machine indices); the
    # base-model justification is that addressing is not charged.
    meta: tuple = ()


def msg(src, dst, payload, id_flags=(), meta=()) -> Message:
    return Message(src, dst, tuple(payload), tuple(id_flags), tuple(meta))


class Env:
    """Per-machine view of the world, family-dependent.

    Fields are populated according to the model family; programs must
    only rely on what their family provides.
    """

    __slots__ = (
        "family",
        "me",
        "index",
        "M",
        "S",
        "C",
        "n",
        "ids",
        "neighbors",
        "degree",
        "labels",
        "_learned",
        "_fv",
        "_fv_queries",
        "_round_box",
    )

    def __init__(self, family, me):
        self.family = family
        self.me = me
        self.index = None
        self.M = self.S = self.C = self.n = None
        self.ids = None
        self.neighbors = None
        self.degree = None
        self.labels = None
        self._learned = None
        self._fv = None
        self._fv_queries = None
        self._round_box = None

    def f_v(self, candidate_id: int):
        """Port of ``candidate_id`` if it is an initial neighbor, else None.

        Only learned IDs may be queried, and at most C distinct IDs per
        round (query budget); both limits are enforced identically by
        the direct runtime and by cross-model simulations.
        """
        if self.family != NCCSTAR:
            raise SpecError("f_v is only available in the NCCSTAR family")
        if candidate_id not in self._learned:
            raise AddressingViolation(
                self._round_box[0], self.me, f"f_v query on unlearned id {candidate_id}"
            )
        self._fv_queries.add(candidate_id)
        if len(self._fv_queries) > self.C:
            raise AddressingViolation(
                self._round_box[0], self.me, "f_v query budget (C ids/round) exceeded"
            )
        return self._fv(candidate_id)


@dataclass
class RoundTrace:
    spec: dict
    rounds: int = 0
    # Per round: sorted list of [machine, sent, received, state_hw] for
    # machines that sent or received that round.
    per_round: list = field(default_factory=list)
    # Per round: sorted (src, dst, words) triples — the schedule.
    schedule: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    max_send: int = 0
    max_receive: int = 0
    state_high_water: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        """Digest of the communication schedule only: per round, the
        multiset of (sender, receiver, word count) triples."""
        h = hashlib.sha256()
        for r, triples in enumerate(self.schedule, start=1):
            h.update(f"round {r}:".encode())
            for t in triples:
                h.update(repr(t).encode())
        return h.hexdigest()

    def to_json(self) -> str:
        doc = {
            "spec": self.spec,
            "rounds": self.rounds,
            "per_round": self.per_round,
            "violations": [v.as_dict() for v in self.violations],
            "outputs": {str(k): list(v) for k, v in sorted(self.outputs.items(), key=lambda kv: str(kv[0]))},
            "max_send": self.max_send,
            "max_receive": self.max_receive,
            "state_high_water": {str(k): v for k, v in sorted(self.state_high_water.items(), key=lambda kv: str(kv[0]))},
            "fingerprint": self.fingerprint(),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _check_payload(m: Message, round_: int):
    payload = m.payload
    if len(payload) < 1:
        raise SpecError(f"round {round_}: empty payload from {m.src} (minimum one word)")
    for wv in payload:
        if not isinstance(wv, int) or isinstance(wv, bool) or wv < 0 or wv > WORD_MAX:
            raise SpecError(f"round {round_}: payload word out of range from {m.src}: {wv!r}")


def run(
    spec: ModelSpec,
    program,
    inputs,
    max_rounds: int,
    graph: Graph | None = None,
):
    """Execute ``program`` on every machine under ``spec``.

    ``inputs``: for MPC a sequence of per-machine word tuples (length M);
    for NCC families a mapping id -> word tuple.  Returns
    ``(outputs, trace)`` where outputs maps machine -> word tuple.
    """
    if max_rounds < 0:
        raise SpecError("max_rounds must be >= 0")
    family = spec.family

    if family == MPC:
        machines = list(range(spec.M))
        inputs_list = list(inputs)
        if len(inputs_list) != spec.M:
            raise SpecError(f"expected {spec.M} machine inputs, got {len(inputs_list)}")
        total_in = 0
        for i, words in enumerate(inputs_list):
            if len(words) > spec.S:
                raise SpecError(f"machine {i} input of {len(words)} words exceeds S={spec.S}")
            total_in += len(words)
        if spec.M * spec.S < total_in:
            raise SpecError("M*S smaller than total input")
        init_state = {i: tuple(w) for i, w in enumerate(inputs_list)}
    else:
        if graph is not None:
            node_ids = graph.ids
        elif spec.ids is not None:
            node_ids = spec.ids
        else:
            raise SpecError(f"{family} run needs a graph or an id set on the spec")
        machines = list(node_ids)
        in_map = dict(inputs) if inputs else {}
        unknown = set(in_map) - set(node_ids)
        if unknown:
            raise SpecError(f"inputs for unknown node ids: {sorted(unknown)}")
        if family == NCCSTAR:
            for v, words in in_map.items():
                if len(words) > spec.C:
                    raise SpecError(f"node {v} input of {len(words)} words exceeds C={spec.C}")
        init_state = {v: tuple(in_map.get(v, ())) for v in node_ids}

    # --- environments -----------------------------------------------------
    envs: dict = {}
    learned: dict[object, set] = {}
    port_to_id: dict[object, tuple[int, ...]] = {}
    round_box = [0]
    for mch in machines:
        e = Env(family, mch)
        e.n = spec.n
        e._round_box = round_box
        if family == MPC:
            e.index = mch
            e.M = spec.M
            e.S = spec.S
        else:
            e.C = spec.C
            nbrs = tuple(graph.neighbors(mch)) if graph is not None else ()
            if family == NCC:
                e.ids = tuple(machines)
                e.neighbors = nbrs
                if graph is not None and graph.node_labels:
                    e.labels = graph.node_labels.get(mch)
            elif family == NCC0:
                e.neighbors = nbrs
                learned[mch] = set(nbrs)
                learned[mch].add(mch)
            else:  # NCCSTAR
                e.degree = len(nbrs)
                ordered = tuple(sorted(nbrs))
                ports = {nid: p for p, nid in enumerate(ordered, start=1)}
                port_to_id[mch] = ordered
                learned[mch] = set()
                e._learned = learned[mch]
                e._fv = ports.get
                e._fv_queries = set()
        envs[mch] = e

    idset = set(machines)
    halted: set = set()
    outputs: dict[object, list[int]] = {mch: [] for mch in machines}
    pending: dict[object, list[Message]] = {}
    trace = RoundTrace(spec=spec.describe())
    measure_cache: dict = {}
    state = init_state

    r = 0
    while r < max_rounds:
        if len(halted) == len(machines):
            break
        r += 1
        round_box[0] = r
        inboxes = pending
        pending = {}

        recv_words: dict[object, int] = {}
        for dst, msgs_ in inboxes.items():
            if dst in halted:
                raise AddressingViolation(r, dst, "message delivered to a halted machine")
            total = sum(len(m.payload) for m in msgs_)
            recv_words[dst] = total
            if family == MPC and total > spec.S:
                rec = Violation(r, dst, "receive", total, spec.S)
                trace.violations.append(rec)
                raise BandwidthViolation(rec)
            # Knowledge tracking on delivery.
            if family in (NCC0, NCCSTAR):
                learn = learned[dst]
                for m in msgs_:
                    if family == NCC0:
                        learn.add(m.src)
                    for i in m.id_flags:
                        learn.add(m.payload[i])

        sent_words: dict[object, int] = {}
        round_sched: list[tuple] = []
        round_stats: list[list] = []
        for mch in machines:
            if mch in halted:
                continue
            inbox = tuple(inboxes.get(mch, ()))
            if family == NCCSTAR:
                envs[mch]._fv_queries = set()
            try:
                new_state, outbox, fragment, halt = program.step(r, state[mch], inbox, envs[mch])
            except SimulationError:
                raise
            except Exception as exc:  # surface program bugs with context
                raise SimulationError(f"program error on machine {mch}, round {r}: {exc!r}") from exc

            sent = 0
            for m in outbox:
                _check_payload(m, r)
                dst = m.dst
                if family == MPC:
                    if not isinstance(dst, int) or not (0 <= dst < spec.M):
                        raise AddressingViolation(r, mch, f"bad machine index {dst!r}")
                elif family == NCC:
                    if dst not in idset:
                        raise AddressingViolation(r, mch, f"unknown node id {dst!r}")
                elif family == NCC0:
                    if dst not in learned[mch]:
                        raise AddressingViolation(r, mch, f"id {dst!r} not learned")
                    if dst not in idset:
                        raise AddressingViolation(r, mch, f"no such node {dst!r}")
                else:  # NCCSTAR
                    if isinstance(dst, tuple) and len(dst) == 2 and dst[0] == "port":
                        j = dst[1]
                        if not (1 <= j <= envs[mch].degree):
                            raise AddressingViolation(r, mch, f"port {j} out of range")
                        dst = port_to_id[mch][j - 1]
                    elif dst in learned[mch] and dst in idset:
                        pass
                    else:
                        raise AddressingViolation(r, mch, f"id {dst!r} not learned")
                    # Senders are anonymous in NCCSTAR; identity travels
                    # only via ID-tagged payload words.
                    m = Message("anon", dst, m.payload, m.id_flags, m.meta)
                if m.dst != dst:
                    m = Message(m.src, dst, m.payload, m.id_flags, m.meta)
                sent += len(m.payload)
                pending.setdefault(dst, []).append(m)
                round_sched.append((_key(mch), _key(dst), len(m.payload)))
            if sent:
                sent_words[mch] = sent
            if family == MPC and sent > spec.S:
                rec = Violation(r, mch, "send", sent, spec.S)
                trace.violations.append(rec)
                raise BandwidthViolation(rec)

            state[mch] = new_state
            hw = words_in(new_state, measure_cache)
            prev_hw = trace.state_high_water.get(_key(mch), 0)
            if hw > prev_hw:
                trace.state_high_water[_key(mch)] = hw
            if family == MPC and hw > spec.S:
                rec = Violation(r, mch, "state", hw, spec.S)
                trace.violations.append(rec)
                raise MemoryViolation(rec)
            if family == NCCSTAR and hw > spec.C:
                rec = Violation(r, mch, "state", hw, spec.C)
                trace.violations.append(rec)
                raise MemoryViolation(rec)

            if fragment:
                outputs[mch].extend(fragment)
            if halt:
                halted.add(mch)

        if family != MPC:
            for mch in machines:
                total = recv_words.get(mch, 0) + sent_words.get(mch, 0)
                if total > spec.C:
                    rec = Violation(r, mch, "capacity", total, spec.C)
                    trace.violations.append(rec)
                    raise BandwidthViolation(rec)

        stats = []
        for mch in machines:
            s = sent_words.get(mch, 0)
            rc = recv_words.get(mch, 0)
            if s or rc:
                stats.append([_key(mch), s, rc, words_in(state[mch], measure_cache)])
                if s > trace.max_send:
                    trace.max_send = s
                if rc > trace.max_receive:
                    trace.max_receive = rc
        trace.per_round.append(stats)
        round_sched.sort()
        trace.schedule.append(tuple(round_sched))
        trace.rounds = r

    if len(halted) != len(machines):
        live = [m for m in machines if m not in halted]
        diagnosis = ""
        if family in (NCC0, NCCSTAR) and graph is not None and not graph.is_connected():
            diagnosis = "input graph is disconnected"
        raise NonTermination(max_rounds, live, diagnosis)
    if pending:
        first = sorted(pending, key=_key)[0]
        raise AddressingViolation(trace.rounds + 1, first, "message delivered to a halted machine")

    out = {mch: tuple(vals) for mch, vals in outputs.items()}
    trace.outputs = out
    return out, trace


def _key(mch) -> object:
    return mch


def decode_output(outputs: dict, decoder):
    """Apply a problem decoder to the per-machine outputs."""
    try:
        return decoder(outputs)
    except SimulationError:
        raise
    except Exception as exc:
        raise DecodeError(f"malformed output: {exc!r}") from exc

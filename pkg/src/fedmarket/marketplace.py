"""Buyer, seller and platform roles and the trial / selection / formal phases.

Parties are single-threaded state machines: ``handle(msg)`` returns the
messages to send in reply. The platform is the only coordinator; it runs one
request at a time, pumps any parties hosted in the same process, and collects
replies by sender so the outcome does not depend on arrival order.
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass
import csv
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .estimation import (
    TrialRecord,
    fit,
    load_records,
    optimize_ratio,
    predict,
    project_scale,
)
from .fed_wasserstein import (
    DEFAULT_T,
    DEFAULT_T_MIN,
    InterpolatingMeasure,
    SharedMeasureSpec,
    SubsetOracle,
    allocate_counts,
    barycentric_interpolate,
    combine_wad,
    concat_cost,
    sample_shared_measure,
    subselect,
)
from .fl_engine import (
    Arch,
    EvalResult,
    FedConfig,
    ModelParams,
    aggregate,
    evaluate,
    init_model,
    local_train,
)
from .measure_ot import DiscreteMeasure, default_label_penalty
from .protocol import (
    ErrorMsg,
    EvalRequest,
    EvalResultMsg,
    GlobalModel,
    InProcTransport,
    InterpMeasure,
    LocalUpdate,
    Message,
    ProtocolError,
    SampleIndices,
    SharedMeasureInit,
    TrialRecordMsg,
    TrialRequest,
)

PLATFORM = "platform"
SESSION_CLOSED = "session closed"


class TrialRejected(ValueError):
    def __init__(self, message: str, seller: str):
        super().__init__(message)
        self.seller = seller


class SessionAborted(RuntimeError):
    pass


def config_to_dict(cfg: FedConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden_dims"] = list(d["hidden_dims"])
    return d


def config_from_dict(d: dict) -> FedConfig:
    return FedConfig(**{**d, "hidden_dims": tuple(d.get("hidden_dims", ()))})


def _arch_from_list(spec) -> Arch:
    return Arch(int(spec[0]), tuple(int(h) for h in spec[1:-1]), int(spec[-1]))


def _arch_to_list(arch: Arch) -> list:
    return [arch.input_dim, *arch.hidden_dims, arch.num_classes]


def stratified_order(labels, rng) -> np.ndarray:
    """Random order whose every prefix keeps the class mix of ``labels``.

    Each class is shuffled and its ``j``-th member gets the key
    ``(j + u) / n_c`` with ``u`` uniform; sorting by key interleaves the
    classes proportionally.
    """
    labels = np.asarray(labels)
    keys = np.empty(labels.size)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        keys[idx] = (np.arange(idx.size) + rng.random(idx.size)) / idx.size
    return np.argsort(keys, kind="stable")


class Party:
    role = ""

    def __init__(self, party_id: str, session_id: str = "session", t: float = DEFAULT_T,
                 t_min: float = DEFAULT_T_MIN):
        self.id = party_id
        self.session_id = session_id
        self.t = t
        self.t_min = t_min
        self._seq = 0
        self.closed = False

    def _msg(self, cls, receiver: str, **fields) -> Message:
        msg = cls(self.session_id, self.id, receiver, self._seq, **fields)
        self._seq += 1
        return msg

    def _interp(self, msg: SharedMeasureInit, data: DiscreteMeasure) -> Message:
        shared = DiscreteMeasure.uniform(np.asarray(msg.points, dtype=float))
        eta = barycentric_interpolate(data, shared, self.t, self.id, t_min=self.t_min)
        return self._msg(InterpMeasure, msg.sender, party_id=self.id, t=eta.t,
                         points=eta.points, labels=eta.labels)

    def handle(self, msg: Message) -> list[Message]:
        if msg.session_id != self.session_id:
            raise ProtocolError(f"{self.id}: message for session {msg.session_id!r}")
        if isinstance(msg, ErrorMsg):
            self.closed = True
            return []
        return self._handle(msg)

    def _handle(self, msg: Message) -> list[Message]:
        raise NotImplementedError


class Seller(Party):
    """Holds pilot and (optionally) full data; reveals only an interpolating
    measure of the pilot, index lists and model updates."""

    role = "seller"

    def __init__(self, party_id: str, pilot: DiscreteMeasure, full: Optional[DiscreteMeasure] = None,
                 seed: int = 0, stratified: bool = True, **kw):
        super().__init__(party_id, **kw)
        self.pilot = pilot
        self.full = full
        self.seed = seed
        self.stratified = stratified
        self._runs: dict = {}

    def permutation(self, phase: str) -> np.ndarray:
        """Sampling order for ``phase``; a budget of ``c`` rows takes the first
        ``c``. Stratified by the seller's own labels unless disabled."""
        data = self.full if phase == "formal" else self.pilot
        rng = np.random.default_rng([self.seed, 1 if phase == "formal" else 0])
        if self.stratified and data.labels is not None:
            return stratified_order(data.labels, rng)
        return rng.permutation(data.n)

    def _handle(self, msg):
        if isinstance(msg, SharedMeasureInit):
            return [self._interp(msg, self.pilot)]
        if isinstance(msg, TrialRequest):
            return [self._on_request(msg)]
        if isinstance(msg, GlobalModel):
            return [self._on_model(msg)]
        raise ProtocolError(f"seller {self.id} cannot handle {msg.TAG}")

    def _on_request(self, msg: TrialRequest):
        order = msg.config["order"]
        slot = order.index(self.id)
        data = self.full if msg.phase == "formal" else self.pilot
        if data is None:
            return self._msg(ErrorMsg, msg.sender, run_id=msg.run_id,
                             reason=f"seller {self.id} holds no {msg.phase} data")
        perm = self.permutation(msg.phase)
        if msg.phase == "permutation":
            return self._msg(SampleIndices, msg.sender, run_id=msg.run_id, party_id=self.id, indices=perm)
        counts = allocate_counts(msg.p, msg.n)
        need = int(counts[slot])
        if need > data.n:
            return self._msg(ErrorMsg, msg.sender, run_id=msg.run_id,
                             reason=f"seller {self.id} holds {data.n} rows, {need} requested")
        idx = perm[:need]
        if need:
            rank = int(np.count_nonzero(counts[:slot]))
            cfg = config_from_dict(msg.config["fed"])
            self._runs[msg.run_id] = {
                "data": data.subset(idx),
                "cfg": cfg,
                "client": rank,
                "control": None,
                "arch": _arch_from_list(msg.config["arch"]),
            }
        return self._msg(SampleIndices, msg.sender, run_id=msg.run_id, party_id=self.id, indices=idx)

    def _on_model(self, msg: GlobalModel):
        run = self._runs.get(msg.run_id)
        if run is None:
            raise ProtocolError(f"seller {self.id} has no subset for run {msg.run_id!r}")
        cfg = run["cfg"]
        model = ModelParams(run["arch"], np.asarray(msg.weights))
        controls = None
        if cfg.algorithm == "scaffold":
            if run["control"] is None:
                run["control"] = np.zeros_like(model.weights)
            server = np.zeros_like(model.weights) if msg.control is None else np.asarray(msg.control)
            controls = (server, run["control"])
        local, aux = local_train(model, run["data"], model, cfg, msg.round, run["client"], controls)
        wire_aux = {"tau": int(aux["tau"])}
        if "control" in aux:
            run["control"] = aux["control"]
            wire_aux["control_delta"] = aux["control_delta"]
        if msg.round == cfg.rounds - 1:
            self._runs.pop(msg.run_id)
        return self._msg(LocalUpdate, msg.sender, run_id=msg.run_id, round=msg.round, party_id=self.id,
                         weights=local.weights, n_samples=run["data"].n, aux=wire_aux)


class Buyer(Party):
    """Holds the validation set and evaluates models it is shown."""

    role = "buyer"

    def __init__(self, party_id: str, val: DiscreteMeasure, **kw):
        super().__init__(party_id, **kw)
        self.val = val
        self._models: dict = {}
        self.records: list = []

    def _handle(self, msg):
        if isinstance(msg, SharedMeasureInit):
            return [self._interp(msg, self.val)]
        if isinstance(msg, GlobalModel):
            if msg.arch is None:
                raise ProtocolError("buyer needs the model architecture to evaluate")
            self._models[msg.run_id] = msg
            return []
        if isinstance(msg, EvalRequest):
            gm = self._models.pop(msg.run_id, None)
            if gm is None:
                raise ProtocolError(f"buyer has no model for run {msg.run_id!r}")
            res = evaluate(ModelParams(_arch_from_list(gm.arch), np.asarray(gm.weights)), self.val)
            return [self._msg(EvalResultMsg, msg.sender, run_id=msg.run_id,
                              accuracy=res.accuracy, loss=res.loss)]
        if isinstance(msg, TrialRecordMsg):
            self.records.append(msg)
            return []
        raise ProtocolError(f"buyer cannot handle {msg.TAG}")


@dataclass
class TrainingOutcome:
    model: ModelParams
    result: EvalResult
    indices: list


class RatioSampler:
    """Trial ratios: the uniform point, then the m corners, then Dirichlet(1)
    draws. Draw ``j`` depends only on (seed, j), so any prefix is reproducible."""

    def __init__(self, m: int, seed: int = 0, grid: Optional[Sequence] = None):
        self.m = m
        self.seed = seed
        self.grid = None if grid is None else [np.asarray(g, dtype=float) for g in grid]

    def __call__(self, j: int) -> np.ndarray:
        if self.grid is not None:
            return self.grid[j % len(self.grid)]
        if j == 0:
            return np.full(self.m, 1.0 / self.m)
        if j <= self.m:
            return np.eye(self.m)[j - 1]
        return np.random.default_rng([self.seed, j]).dirichlet(np.ones(self.m))


class Session:
    """Platform-side view of one marketplace session.

    ``sellers`` and ``buyer`` may be party objects (hosted here and pumped
    after each send) or bare ids of parties served elsewhere over the same
    transport.
    """

    def __init__(
        self,
        sellers: Sequence[Union[Seller, str]],
        buyer: Union[Buyer, str],
        transport=None,
        session_id: str = "session",
        shared: Optional[SharedMeasureSpec] = None,
        t: float = DEFAULT_T,
        t_min: float = DEFAULT_T_MIN,
        label_penalty: Union[float, str] = 0.0,
        cfg: Optional[FedConfig] = None,
        timeout: float = 60.0,
    ):
        if not sellers:
            raise ValueError("a session needs at least one seller")
        self.transport = transport if transport is not None else InProcTransport()
        self.session_id = session_id
        self.t = t
        self.t_min = t_min
        self.label_penalty = label_penalty
        self.cfg = cfg or FedConfig()
        self.shared_spec = shared
        self.timeout = timeout
        self.platform = Party(PLATFORM, session_id, t, t_min)
        self.local: list[Party] = []
        self.seller_ids = []
        for s in sellers:
            self.seller_ids.append(s if isinstance(s, str) else s.id)
            if not isinstance(s, str):
                self.local.append(s)
        self.buyer_id = buyer if isinstance(buyer, str) else buyer.id
        if not isinstance(buyer, str):
            self.local.append(buyer)
        ids = [PLATFORM, self.buyer_id, *self.seller_ids]
        if len(set(ids)) != len(ids):
            raise ValueError("party ids must be unique")
        for p in self.local:
            if p.session_id != session_id:
                raise ValueError(f"party {p.id} belongs to session {p.session_id!r}")
        for pid in ids:
            if pid == PLATFORM or pid in {p.id for p in self.local}:
                self.transport.register(pid)
        self.etas: dict = {}
        self.cost = None
        self.penalty = 0.0
        self._oracle = None
        self._num_classes = None

    @property
    def m(self) -> int:
        return len(self.seller_ids)

    # ------------------------------------------------------------ plumbing

    def _send(self, cls, receiver, **fields):
        self.transport.send(self.platform._msg(cls, receiver, **fields))

    def _pump(self) -> bool:
        moved = False
        for party in self.local:
            while True:
                msg = self.transport.recv(party.id)
                if msg is None:
                    break
                moved = True
                for out in party.handle(msg):
                    self.transport.send(out)
        return moved

    def _collect(self, expect: Sequence[str], tag: type) -> dict:
        replies: dict = {}
        pending = set(expect)
        deadline = time.monotonic() + self.timeout
        sync = isinstance(self.transport, InProcTransport)
        while pending:
            moved = self._pump()
            msg = self.transport.recv(PLATFORM, timeout=None if sync else 0.01)
            if msg is None:
                if (sync and not moved) or time.monotonic() > deadline:
                    raise SessionAborted(f"no reply from {sorted(pending)}")
                continue
            if msg.session_id != self.session_id:
                raise ProtocolError(f"message for session {msg.session_id!r}")
            if isinstance(msg, ErrorMsg):
                raise TrialRejected(msg.reason, msg.sender)
            if msg.sender not in pending or not isinstance(msg, tag):
                raise ProtocolError(f"unexpected {msg.TAG} from {msg.sender}")
            replies[msg.sender] = msg
            pending.discard(msg.sender)
        return replies

    def close(self) -> None:
        """Tell every party the session is over."""
        for pid in [*self.seller_ids, self.buyer_id]:
            self._send(ErrorMsg, pid, reason=SESSION_CLOSED)
        self._pump()

    @property
    def log(self):
        return self.transport.log

    # ------------------------------------------------------------ setup

    def setup(self) -> None:
        """Broadcast shared points and collect every interpolating measure once."""
        if self.cost is not None:
            return
        if self.shared_spec is None:
            raise ValueError("session needs a shared-measure spec")
        spec = self.shared_spec
        gamma = sample_shared_measure(spec)
        everyone = [*self.seller_ids, self.buyer_id]
        for pid in everyone:
            self._send(SharedMeasureInit, pid, seed=spec.seed, k=spec.k, d=spec.d,
                       mean=spec.mean, std=spec.std, points=gamma.points)
        replies = self._collect(everyone, InterpMeasure)
        for pid, msg in replies.items():
            if msg.t < self.t_min:
                raise ProtocolError(f"{pid} sent t={msg.t} below the floor {self.t_min}")
            self.etas[pid] = InterpolatingMeasure(msg.t, np.asarray(msg.points), pid, msg.labels)
        eta_val = self.etas[self.buyer_id]
        penalty = self.label_penalty
        if penalty == "auto":
            penalty = default_label_penalty(eta_val.as_measure())
        self.penalty = float(penalty)
        self.cost = concat_cost([self.etas[s] for s in self.seller_ids], eta_val, self.penalty)
        labels = [e.labels for e in self.etas.values() if e.labels is not None]
        self._num_classes = max(2, int(max(l.max() for l in labels)) + 1) if labels else 2

    def pilot_sizes(self) -> list[int]:
        self.setup()
        return self.cost.rows_per_source

    def arch(self, cfg: FedConfig) -> Arch:
        self.setup()
        return Arch(self.cost_dim, cfg.hidden_dims, cfg.num_classes or self._num_classes)

    @property
    def cost_dim(self) -> int:
        return self.etas[self.buyer_id].d

    # ------------------------------------------------------------ runs

    def train(self, run_id: str, p, n: int, cfg: FedConfig, phase: str = "trial") -> TrainingOutcome:
        """Index exchange, federated rounds and buyer-side evaluation."""
        arch = self.arch(cfg)
        config = {"order": list(self.seller_ids), "fed": config_to_dict(cfg), "arch": _arch_to_list(arch)}
        for pid in self.seller_ids:
            self._send(TrialRequest, pid, run_id=run_id, p=p, n=n, phase=phase, config=config)
        got = self._collect(self.seller_ids, SampleIndices)
        indices = [np.asarray(got[s].indices, dtype=np.int64) for s in self.seller_ids]
        active = [s for s, idx in zip(self.seller_ids, indices) if idx.size]
        if not active:
            raise ValueError("the budget selects no rows")
        model = init_model(arch, cfg.seed)
        state: dict = {}
        for r in range(cfg.rounds):
            control = state.get("control") if cfg.algorithm == "scaffold" else None
            for pid in active:
                self._send(GlobalModel, pid, run_id=run_id, round=r, weights=model.weights,
                           control=control)
            ups = self._collect(active, LocalUpdate)
            updates = []
            for pid in active:
                u = ups[pid]
                aux = {"tau": u.aux["tau"]}
                if "control_delta" in u.aux:
                    aux["control_delta"] = np.asarray(u.aux["control_delta"])
                updates.append((ModelParams(arch, np.asarray(u.weights)), aux, u.n_samples))
            anchor = None if cfg.algorithm in ("fedavg", "fedprox") else model
            model = aggregate(updates, cfg.algorithm, anchor, state)
        result = self.evaluate_at_buyer(run_id, model)
        return TrainingOutcome(model, result, indices)

    def evaluate_at_buyer(self, run_id: str, model: ModelParams) -> EvalResult:
        self._send(GlobalModel, self.buyer_id, run_id=run_id, round=-1, weights=model.weights,
                   arch=_arch_to_list(model.arch))
        self._send(EvalRequest, self.buyer_id, run_id=run_id)
        res = self._collect([self.buyer_id], EvalResultMsg)[self.buyer_id]
        return EvalResult(res.accuracy, res.loss)

    def permutations(self) -> list[np.ndarray]:
        config = {"order": list(self.seller_ids)}
        for pid in self.seller_ids:
            self._send(TrialRequest, pid, run_id="permutation", p=np.full(self.m, 1.0 / self.m), n=0,
                       phase="permutation", config=config)
        got = self._collect(self.seller_ids, SampleIndices)
        return [np.asarray(got[s].indices, dtype=np.int64) for s in self.seller_ids]

    def oracle(self) -> SubsetOracle:
        """CombineWad of any (p, N) using the sellers' fixed pilot orderings."""
        if self._oracle is None:
            self.setup()
            self._oracle = SubsetOracle(self.cost, permutations=self.permutations())
        return self._oracle


def _check_budget(session: Session, p, n: int) -> None:
    counts = allocate_counts(p, n)
    for sid, c, size in zip(session.seller_ids, counts, session.pilot_sizes()):
        if c > size:
            raise TrialRejected(f"trial needs {c} rows from seller {sid}, which holds {size}", sid)


def run_trial_phase(
    session: Session,
    B_s: int,
    budgets: Sequence[int],
    ratio_sampler: Optional[RatioSampler] = None,
    records_path=None,
    cfg: Optional[FedConfig] = None,
) -> list[TrialRecord]:
    """Run ``B_s`` trials; trial ``j`` uses ratio ``j // len(budgets)`` at
    budget ``budgets[j % len(budgets)]``.

    Each record is appended and flushed to ``records_path`` before the buyer
    is notified, so a rerun after a crash resumes at the first trial missing
    from the file.
    """
    if B_s < 1:
        raise ValueError("B_s must be at least 1")
    if not budgets:
        raise ValueError("need at least one budget")
    cfg = cfg or session.cfg
    session.setup()
    sampler = ratio_sampler or RatioSampler(session.m)
    done: list[TrialRecord] = []
    if records_path is not None and Path(records_path).exists():
        done = load_records(records_path)[:B_s]
    records = list(done)
    for j in range(len(done), B_s):
        p = sampler(j // len(budgets))
        n = int(budgets[j % len(budgets)])
        run_id = f"trial-{j:04d}"
        _check_budget(session, p, n)
        out = session.train(run_id, p, n, cfg)
        w = combine_wad(subselect(session.cost, out.indices), candidates=session.cost).value
        rec = TrialRecord(p, n, w, out.result.accuracy, run_id)
        if records_path is not None:
            with open(records_path, "a") as fh:
                fh.write(rec.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        session._send(TrialRecordMsg, session.buyer_id, run_id=run_id, p=p, n=n, w=w, v=rec.v)
        session._pump()
        records.append(rec)
    return records


@dataclass
class Selection:
    p_star: np.ndarray
    projected: float
    trajectory: list
    budgets: tuple
    estimators: tuple


def run_selection_phase(
    session: Session,
    records: Sequence[TrialRecord],
    N: int,
    kind: str = "linear",
    p0=None,
    steps: int = 50,
    alpha0: float = 0.1,
    ridge: float = 1e-6,
) -> Selection:
    """Fit per-budget estimators at the smallest and largest trial budgets and
    ascend the projected prediction at ``N``. No formal training happens."""
    budgets = sorted({r.n for r in records})
    if len(budgets) < 2:
        raise ValueError(f"selection needs trial records at two or more budgets, got {budgets}")
    n0, n1 = budgets[0], budgets[-1]
    ests = [fit([r for r in records if r.n == b], kind, ridge=ridge) for b in (n0, n1)]
    oracle = session.oracle()
    w_fns = [lambda p, b=n0: oracle(p, b), lambda p, b=n1: oracle(p, b)]
    p0 = np.full(session.m, 1.0 / session.m) if p0 is None else np.asarray(p0, dtype=float)
    search = optimize_ratio(ests, N, p0, steps, w_fns, alpha0=alpha0)
    p_star = search.p_final
    v0 = predict(ests[0], p_star, oracle(p_star, n0).value)
    v1 = predict(ests[1], p_star, oracle(p_star, n1).value)
    projected = float(np.clip(project_scale(v0, v1, n0, n1, N), 0.0, 1.0))
    return Selection(p_star, projected, search.trajectory, (n0, n1), tuple(ests))


def run_formal_training(session: Session, p_star, N: int, cfg: Optional[FedConfig] = None):
    """Train on ``p_star * N`` rows of the sellers' full data; the buyer only
    evaluates the final model. Returns ``(model, EvalResult)``."""
    cfg = cfg or session.cfg
    out = session.train("formal", p_star, N, cfg, phase="formal")
    return out.model, out.result


def serve_party(party: Party, transport, poll: float = 0.05) -> None:
    """Run a party hosted in its own process until the platform closes the session."""
    transport.register(party.id)
    while not party.closed:
        msg = transport.recv(party.id, timeout=poll)
        if msg is None:
            continue
        for out in party.handle(msg):
            transport.send(out)


def write_report(path, records: Sequence[TrialRecord]) -> None:
    """CSV with columns run_id, p_0..p_{m-1}, n, w, v in record order."""
    m = len(records[0].p) if records else 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["run_id", *(f"p_{i}" for i in range(m)), "n", "w", "v"])
        for r in records:
            out.writerow([r.run_id, *(repr(float(x)) for x in r.p), r.n, repr(r.w), repr(r.v)])

"""Grid case parsing and the DC measurement model.

Two input formats are accepted:

* a subset of the MATPOWER text format (``baseMVA``, ``bus``, ``gen`` and
  ``branch`` tables, with or without the ``mpc.`` prefix);
* a native JSON format that mirrors :class:`GridCase` field by field.

Quantities are kept in per-unit on ``base_mva``. Branches are numbered from 1
in every external interface and stored 0-based internally.

The measurement vector is ordered ``[P (all N buses); F (L lines); -F]`` so
that ``m = N + 2L``. The injection block is ``A_full @ D @ A_reduced.T``,
which equals the full nodal balance because the slack angle is pinned at 0.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import networkx as nx
import numpy as np

from .errors import (
    DanglingBusReference,
    DisconnectedGrid,
    MalformedCase,
    MultipleSlack,
    NonpositiveReactance,
    NoSlack,
    RankDeficient,
    SingularTopology,
)

NATIVE_FORMAT = "ccpalab-case"
NATIVE_VERSION = 1
DEFAULT_SIGMA = 0.01

# MATPOWER column indices (0-based)
_BUS_I, _BUS_TYPE, _PD = 0, 1, 2
_REF = 3
_F_BUS, _T_BUS, _BR_X, _BR_STATUS = 0, 1, 3, 10
_GEN_BUS, _PG, _GEN_STATUS = 0, 1, 7


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool
    load_p: float


@dataclass(frozen=True)
class Branch:
    index: int  # 1-based
    from_bus: int
    to_bus: int
    x: float
    in_service: bool = True


@dataclass(frozen=True)
class Gen:
    bus: int
    gen_p: float


@dataclass(frozen=True)
class GridCase:
    """Immutable DC grid description. All invariants are checked on construction."""

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Gen, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "gens", tuple(self.gens))
        self._validate()

    def _validate(self):
        if not self.buses:
            raise MalformedCase("case has no buses")
        if not np.isfinite(self.base_mva) or self.base_mva <= 0:
            raise MalformedCase(f"baseMVA must be positive, got {self.base_mva}")
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise MalformedCase("duplicate bus ids")
        n_slack = sum(b.is_slack for b in self.buses)
        if n_slack == 0:
            raise NoSlack("no slack (reference) bus")
        if n_slack > 1:
            raise MultipleSlack(f"{n_slack} slack buses, expected exactly one")
        known = set(ids)
        for pos, br in enumerate(self.branches):
            if br.index != pos + 1:
                raise MalformedCase(f"branch at position {pos} has index {br.index}")
            if not (np.isfinite(br.x) and br.x > 0):
                raise NonpositiveReactance(f"branch {br.index} has reactance {br.x}")
            if br.from_bus not in known or br.to_bus not in known:
                raise DanglingBusReference(
                    f"branch {br.index} references {br.from_bus}->{br.to_bus}"
                )
            if br.from_bus == br.to_bus:
                raise MalformedCase(f"branch {br.index} is a self-loop")
        for g in self.gens:
            if g.bus not in known:
                raise DanglingBusReference(f"generator on unknown bus {g.bus}")
        if not nx.is_connected(self.graph()):
            raise DisconnectedGrid("in-service branch graph is not connected")

    # -- sizes and index maps -------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_measurements(self) -> int:
        return self.n_bus + 2 * self.n_branch

    @property
    def n_states(self) -> int:
        return self.n_bus - 1

    @cached_property
    def bus_pos(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack_pos(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.is_slack)

    @cached_property
    def slack_id(self) -> int:
        return self.buses[self.slack_pos].id

    @cached_property
    def state_pos(self) -> np.ndarray:
        """Bus positions that carry a state variable (all but the slack)."""
        return _readonly(np.array([i for i in range(self.n_bus) if i != self.slack_pos]))

    @cached_property
    def reactances(self) -> np.ndarray:
        return _readonly(np.array([br.x for br in self.branches], dtype=float))

    @cached_property
    def in_service(self) -> np.ndarray:
        return _readonly(np.array([br.in_service for br in self.branches], dtype=bool))

    @cached_property
    def from_pos(self) -> np.ndarray:
        return _readonly(np.array([self.bus_pos[br.from_bus] for br in self.branches], dtype=int))

    @cached_property
    def to_pos(self) -> np.ndarray:
        return _readonly(np.array([self.bus_pos[br.to_bus] for br in self.branches], dtype=int))

    @cached_property
    def loads(self) -> np.ndarray:
        return _readonly(np.array([b.load_p for b in self.buses], dtype=float))

    @cached_property
    def generation(self) -> np.ndarray:
        g = np.zeros(self.n_bus)
        for gen in self.gens:
            g[self.bus_pos[gen.bus]] += gen.gen_p
        return _readonly(g)

    @cached_property
    def jacobian_matrix(self) -> np.ndarray:
        return _readonly(_jacobian(self))

    def active_branch_indices(self) -> list[int]:
        return [br.index for br in self.branches if br.in_service]

    def graph(self) -> nx.MultiGraph:
        """Undirected multigraph of in-service branches keyed by branch index."""
        g = nx.MultiGraph()
        g.add_nodes_from(b.id for b in self.buses)
        for br in self.branches:
            if br.in_service:
                g.add_edge(br.from_bus, br.to_bus, key=br.index, x=br.x)
        return g

    def bridges(self) -> frozenset[int]:
        """Indices of in-service branches whose loss would island the grid."""
        simple = nx.Graph()
        simple.add_nodes_from(b.id for b in self.buses)
        parallel: dict[frozenset, list[int]] = {}
        for br in self.branches:
            if br.in_service:
                parallel.setdefault(frozenset((br.from_bus, br.to_bus)), []).append(br.index)
        for ends, idx in parallel.items():
            simple.add_edge(*ends)
        out = set()
        for u, v in nx.bridges(simple):
            idx = parallel[frozenset((u, v))]
            if len(idx) == 1:
                out.add(idx[0])
        return frozenset(out)

    def with_reactances(self, x) -> GridCase:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_branch,):
            raise ValueError(f"expected {self.n_branch} reactances, got shape {x.shape}")
        branches = tuple(replace(br, x=float(v)) for br, v in zip(self.branches, x))
        return replace(self, branches=branches)

    def fingerprint(self) -> str:
        return hashlib.sha256(to_native(self).encode()).hexdigest()


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# -- parsing -------------------------------------------------------------------

_ASSIGN_RE = re.compile(r"(?:mpc\.)?(\w+)\s*=\s*", re.MULTILINE)


def _strip_comments(text: str) -> str:
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(body: str, name: str) -> np.ndarray:
    rows = []
    for chunk in re.split(r"[;\n]", body):
        chunk = chunk.strip().strip(",")
        if not chunk:
            continue
        try:
            rows.append([float(tok) for tok in re.split(r"[\s,]+", chunk) if tok])
        except ValueError as exc:
            raise MalformedCase(f"non-numeric entry in '{name}' table: {chunk!r}") from exc
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedCase(f"ragged rows in '{name}' table")
    return np.array(rows, dtype=float)


def _parse_matpower(text: str) -> GridCase:
    text = _strip_comments(text)
    tables: dict[str, np.ndarray] = {}
    base_mva = None
    for match in _ASSIGN_RE.finditer(text):
        name = match.group(1)
        rest = text[match.end():]
        if rest.startswith("["):
            close = rest.find("]")
            if close < 0:
                raise MalformedCase(f"unterminated matrix '{name}'")
            tables[name] = _parse_matrix(rest[1:close], name)
        elif name == "baseMVA":
            num = re.match(r"([-+0-9.eE]+)", rest)
            if num is None:
                raise MalformedCase("unreadable baseMVA")
            base_mva = float(num.group(1))
    if base_mva is None:
        raise MalformedCase("missing baseMVA")
    for name in ("bus", "branch"):
        if name not in tables or tables[name].size == 0:
            raise MalformedCase(f"missing '{name}' table")
    bus, branch = tables["bus"], tables["branch"]
    gen = tables.get("gen", np.zeros((0, 0)))
    if bus.shape[1] < 3 or branch.shape[1] < 4 or (gen.size and gen.shape[1] < 2):
        raise MalformedCase("tables have too few columns")

    buses = tuple(
        Bus(id=int(row[_BUS_I]), is_slack=int(row[_BUS_TYPE]) == _REF, load_p=row[_PD] / base_mva)
        for row in bus
    )
    branches = tuple(
        Branch(
            index=k + 1,
            from_bus=int(row[_F_BUS]),
            to_bus=int(row[_T_BUS]),
            x=float(row[_BR_X]),
            in_service=bool(row[_BR_STATUS]) if branch.shape[1] > _BR_STATUS else True,
        )
        for k, row in enumerate(branch)
    )
    gens = tuple(
        Gen(bus=int(row[_GEN_BUS]), gen_p=row[_PG] / base_mva)
        for row in gen
        if gen.shape[1] <= _GEN_STATUS or row[_GEN_STATUS] > 0
    )
    return GridCase(base_mva=base_mva, buses=buses, branches=branches, gens=gens)


def _parse_native(text: str) -> GridCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCase(f"invalid JSON: {exc}") from exc
    if doc.get("format") != NATIVE_FORMAT:
        raise MalformedCase(f"not a {NATIVE_FORMAT} document")
    try:
        return GridCase(
            base_mva=float(doc["base_mva"]),
            buses=tuple(
                Bus(id=int(b["id"]), is_slack=bool(b["is_slack"]), load_p=float(b["load_p"]))
                for b in doc["buses"]
            ),
            branches=tuple(
                Branch(
                    index=int(b["index"]),
                    from_bus=int(b["from_bus"]),
                    to_bus=int(b["to_bus"]),
                    x=float(b["x"]),
                    in_service=bool(b.get("in_service", True)),
                )
                for b in doc["branches"]
            ),
            gens=tuple(Gen(bus=int(g["bus"]), gen_p=float(g["gen_p"])) for g in doc.get("gens", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCase(f"bad native case field: {exc}") from exc


def parse_case(text: str) -> GridCase:
    """Parse a MATPOWER-style or native JSON case. Format is sniffed from the text."""
    if text.lstrip().startswith("{"):
        return _parse_native(text)
    return _parse_matpower(text)


def to_native(grid: GridCase) -> str:
    """Serialize to the native JSON format (canonical: sorted keys, fixed layout)."""
    doc = {
        "format": NATIVE_FORMAT,
        "version": NATIVE_VERSION,
        "base_mva": grid.base_mva,
        "buses": [{"id": b.id, "is_slack": b.is_slack, "load_p": b.load_p} for b in grid.buses],
        "branches": [
            {
                "index": br.index,
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "x": br.x,
                "in_service": br.in_service,
            }
            for br in grid.branches
        ],
        "gens": [{"bus": g.bus, "gen_p": g.gen_p} for g in grid.gens],
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def load_case(name_or_path) -> GridCase:
    """Load a case from a path, or a bundled case by name (``"ieee14"``)."""
    bundled = {"ieee14": "case14.m", "case14": "case14.m"}
    if str(name_or_path) in bundled:
        text = resources.files("ccpalab.cases").joinpath(bundled[str(name_or_path)]).read_text()
    else:
        text = Path(name_or_path).read_text()
    return parse_case(text)


# -- matrices ------------------------------------------------------------------


@dataclass(frozen=True)
class IncidencePair:
    """Branch-bus incidence over in-service branches.

    ``full`` is N x L_active with +1 at the from bus and -1 at the to bus;
    ``reduced`` drops the slack row.
    """

    full: np.ndarray
    reduced: np.ndarray
    bus_ids: tuple[int, ...]
    reduced_bus_ids: tuple[int, ...]
    branch_indices: tuple[int, ...]


def build_incidence(grid: GridCase) -> IncidencePair:
    active = [k for k, br in enumerate(grid.branches) if br.in_service]
    full = np.zeros((grid.n_bus, len(active)))
    cols = np.arange(len(active))
    full[grid.from_pos[active], cols] = 1.0
    full[grid.to_pos[active], cols] = -1.0
    reduced = full[grid.state_pos]
    ids = tuple(b.id for b in grid.buses)
    return IncidencePair(
        full=_readonly(full),
        reduced=_readonly(reduced),
        bus_ids=ids,
        reduced_bus_ids=tuple(ids[i] for i in grid.state_pos),
        branch_indices=tuple(grid.branches[k].index for k in active),
    )


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Linear DC measurement model ``z = H theta + e``.

    ``H`` always has ``N + 2L`` rows, one flow pair per branch of the case;
    rows of out-of-service branches are zero. ``W`` holds ``sigma**-2``.
    """

    H: np.ndarray
    sigma: np.ndarray
    D: np.ndarray
    ordering: tuple[str, ...]
    n_bus: int
    n_branch: int

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @cached_property
    def weights(self) -> np.ndarray:
        return _readonly(self.sigma**-2)

    @property
    def W(self) -> np.ndarray:
        return np.diag(self.weights)

    @cached_property
    def gain(self) -> np.ndarray:
        """WLS estimator matrix ``(H^T W H)^-1 H^T W`` (n x m)."""
        if np.linalg.matrix_rank(self.H) < self.n:
            raise RankDeficient(f"H has rank < {self.n}")
        hw = self.H.T * self.weights
        return _readonly(np.linalg.solve(hw @ self.H, hw))

    def block(self, name: str) -> slice:
        n, l = self.n_bus, self.n_branch
        return {"P": slice(0, n), "F": slice(n, n + l), "-F": slice(n + l, n + 2 * l)}[name]


def measurement_ordering(grid: GridCase) -> tuple[str, ...]:
    return (
        tuple(f"P{b.id}" for b in grid.buses)
        + tuple(f"F{br.index}" for br in grid.branches)
        + tuple(f"-F{br.index}" for br in grid.branches)
    )


def jacobian(grid: GridCase) -> np.ndarray:
    """DC measurement Jacobian ``[A_full D A^T; D A^T; -D A^T]`` (m x n)."""
    return grid.jacobian_matrix.copy()


def _jacobian(grid: GridCase) -> np.ndarray:
    n_bus, n_br = grid.n_bus, grid.n_branch
    susceptance = np.where(grid.in_service, 1.0 / grid.reactances, 0.0)
    # A_full^T over all branches; out-of-service columns are killed by D
    a_full_t = np.zeros((n_br, n_bus))
    rows = np.arange(n_br)
    a_full_t[rows, grid.from_pos] = 1.0
    a_full_t[rows, grid.to_pos] = -1.0
    flow = susceptance[:, None] * a_full_t[:, grid.state_pos]
    inj = a_full_t.T @ flow
    return np.vstack([inj, flow, -flow])


def build_measurement_model(grid: GridCase, sigma=DEFAULT_SIGMA) -> MeasurementModel:
    m = grid.n_measurements
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (m,)).copy()
    if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
        raise ValueError("noise standard deviations must be positive and finite")
    H = jacobian(grid)
    if np.linalg.matrix_rank(H) < grid.n_states:
        raise SingularTopology("measurement Jacobian is rank deficient")
    d = np.where(grid.in_service, 1.0 / grid.reactances, 0.0)
    return MeasurementModel(
        H=_readonly(H),
        sigma=_readonly(sig),
        D=_readonly(np.diag(d)),
        ordering=measurement_ordering(grid),
        n_bus=grid.n_bus,
        n_branch=grid.n_branch,
    )

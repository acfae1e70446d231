"""Power-system cases, MATPOWER ingestion and the graph encoding of a case.

All electrical quantities are per-unit on ``GridCase.base_mva`` and angles are
radians. Megawatts and degrees only appear in the file readers/writers.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

__all__ = [
    "BusKind", "Bus", "Branch", "Generator", "GridCase", "PFGraph", "CaseError",
    "parse_matpower", "load_case", "dumps_case", "loads_case", "case_to_graph",
    "simplify_case", "MASK_PATTERNS", "FEATURES",
]

FEATURES = ("vm", "va", "p", "q")

# unknown = 1
MASK_PATTERNS = {
    "PQ": (1.0, 1.0, 0.0, 0.0),
    "PV": (0.0, 1.0, 0.0, 1.0),
    "SLACK": (0.0, 0.0, 1.0, 1.0),
}


class CaseError(ValueError):
    """Raised for malformed or physically inconsistent cases."""


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    p_demand: float
    q_demand: float
    vm: float
    va: float
    base_kv: float = 0.0
    # shunt conductance/susceptance; only used by the full (unsimplified) admittance model
    gs: float = 0.0
    bs: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    vm_set: float


@dataclass(frozen=True)
class GridCase:
    """A validated bus/branch/generator model.

    ``Branch.from_bus``/``to_bus`` and ``Generator.bus`` are positions in
    ``buses``, not the bus numbers used in the source file (those live in
    ``Bus.id``).
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Generator, ...]
    name: str = field(default="case", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "gens", tuple(self.gens))
        _validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK)

    def kinds(self) -> np.ndarray:
        return np.array([int(b.kind) for b in self.buses])

    def vm_setpoints(self) -> np.ndarray:
        """Voltage magnitudes with generator setpoints applied at PV/slack buses."""
        vm = np.array([b.vm for b in self.buses], dtype=float)
        for g in self.gens:
            vm[g.bus] = g.vm_set
        return vm

    def drawn_power(self) -> tuple[np.ndarray, np.ndarray]:
        """Scheduled net power drawn from each bus: load minus generation.

        Generator reactive output is never scheduled, so ``q`` is the load only.
        """
        p = np.array([b.p_demand for b in self.buses], dtype=float)
        q = np.array([b.q_demand for b in self.buses], dtype=float)
        for g in self.gens:
            p[g.bus] -= g.p_set
        return p, q

    def branch_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        f = np.array([br.from_bus for br in self.branches], dtype=np.int64)
        t = np.array([br.to_bus for br in self.branches], dtype=np.int64)
        r = np.array([br.r for br in self.branches], dtype=float)
        x = np.array([br.x for br in self.branches], dtype=float)
        return f, t, r, x


def _validate(case: GridCase) -> None:
    n = len(case.buses)
    if n == 0:
        raise CaseError("case has no buses")
    if not case.base_mva > 0:
        raise CaseError(f"base_mva must be positive, got {case.base_mva}")
    n_slack = sum(b.kind == BusKind.SLACK for b in case.buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}")
    for b in case.buses:
        if b.kind != BusKind.PQ and not b.vm > 0:
            raise CaseError(f"bus {b.id}: voltage magnitude must be positive at PV/slack buses")
    for k, br in enumerate(case.branches):
        for end in (br.from_bus, br.to_bus):
            if not 0 <= end < n:
                raise CaseError(f"branch {k} references unknown bus position {end}")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {k} is a self-loop on bus position {br.from_bus}")
        if br.r == 0 and br.x == 0:
            raise CaseError(f"branch {k} has zero series impedance")
        if br.tap == 0:
            raise CaseError(f"branch {k} has zero tap ratio")
    vm_at = {}
    for k, g in enumerate(case.gens):
        if not 0 <= g.bus < n:
            raise CaseError(f"generator {k} references unknown bus position {g.bus}")
        if case.buses[g.bus].kind == BusKind.PQ:
            raise CaseError(f"generator {k} sits on PQ bus {case.buses[g.bus].id}")
        if g.bus in vm_at and abs(vm_at[g.bus] - g.vm_set) > 1e-6:
            raise CaseError(
                f"generators on bus {case.buses[g.bus].id} disagree on voltage setpoint "
                f"({vm_at[g.bus]} vs {g.vm_set})")
        vm_at[g.bus] = g.vm_set
    for i, b in enumerate(case.buses):
        if b.kind == BusKind.PV and i not in vm_at:
            raise CaseError(f"PV bus {b.id} has no in-service generator")
    if n > 1:
        f = [br.from_bus for br in case.branches]
        t = [br.to_bus for br in case.branches]
        adj = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
        n_comp, _ = connected_components(adj, directed=False)
        if n_comp != 1:
            raise CaseError(f"branch graph is disconnected ({n_comp} components)")


# --------------------------------------------------------------------------
# MATPOWER reader

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_NUMBER_WORDS = {"inf": np.inf, "+inf": np.inf, "-inf": -np.inf, "nan": np.nan}


def _to_float(tok: str, lineno: int) -> float:
    low = tok.lower()
    if low in _NUMBER_WORDS:
        return _NUMBER_WORDS[low]
    try:
        return float(tok)
    except ValueError:
        raise CaseError(f"line {lineno}: cannot parse number {tok!r}") from None


def _read_matrices(text: str) -> tuple[dict[str, float], dict[str, list[list[float]]]]:
    scalars: dict[str, float] = {}
    matrices: dict[str, list[list[float]]] = {}
    current = None
    row: list[float] = []
    start_line = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("%", 1)[0].strip()
        if not line:
            continue
        if current is None:
            m = _ASSIGN.match(line)
            if not m:
                continue
            name, rhs = m.group(1), m.group(2).strip()
            if rhs.startswith("["):
                current, row, start_line = name, [], lineno
                matrices[name] = []
                line = rhs[1:]
            elif rhs.startswith(("'", '"', "{", "struct")):
                continue
            else:
                scalars[name] = _to_float(rhs.rstrip(";").strip(), lineno)
                continue
        # inside a matrix literal
        done = False
        if "]" in line:
            line, rest = line.split("]", 1)
            if rest.strip().rstrip(";").strip():
                raise CaseError(f"line {lineno}: unexpected text after ']'")
            done = True
        for chunk_i, chunk in enumerate(line.split(";")):
            if chunk_i > 0 and row:
                matrices[current].append(row)
                row = []
            for tok in chunk.replace(",", " ").split():
                row.append(_to_float(tok, lineno))
        if row:
            # newline terminates a row as in MATLAB
            matrices[current].append(row)
            row = []
        if done:
            widths = {len(r) for r in matrices[current]}
            if len(widths) > 1:
                raise CaseError(f"line {start_line}: ragged rows in mpc.{current}")
            current = None
    if current is not None:
        raise CaseError(f"line {start_line}: unterminated matrix mpc.{current}")
    return scalars, matrices


def _need(mat: dict, name: str, min_cols: int) -> np.ndarray:
    if name not in mat:
        raise CaseError(f"missing mpc.{name}")
    arr = np.array(mat[name], dtype=float).reshape(len(mat[name]), -1)
    if arr.shape[0] and arr.shape[1] < min_cols:
        raise CaseError(f"mpc.{name} has {arr.shape[1]} columns, need at least {min_cols}")
    return arr


def parse_matpower(text: str, name: str = "case") -> GridCase:
    """Parse a MATPOWER ``.m`` case into a per-unit :class:`GridCase`.

    Only ``baseMVA``, ``bus``, ``gen`` and ``branch`` are read. Out-of-service
    generators and branches (status column 0) are dropped.
    """
    scalars, mats = _read_matrices(text)
    if "baseMVA" not in scalars:
        raise CaseError("missing mpc.baseMVA")
    base = scalars["baseMVA"]
    bus = _need(mats, "bus", 10)
    gen = _need(mats, "gen", 6)
    branch = _need(mats, "branch", 4)

    pos = {}
    buses = []
    for k, row in enumerate(bus):
        bid = int(row[0])
        if bid in pos:
            raise CaseError(f"duplicate bus number {bid}")
        code = int(row[1])
        if code not in (1, 2, 3):
            raise CaseError(f"bus {bid}: unsupported bus type {code}")
        pos[bid] = k
        buses.append(Bus(
            id=bid, kind=BusKind(code),
            p_demand=row[2] / base, q_demand=row[3] / base,
            vm=row[7], va=np.deg2rad(row[8]), base_kv=row[9],
            gs=row[4] / base, bs=row[5] / base,
        ))

    def lookup(bid, what):
        try:
            return pos[int(bid)]
        except KeyError:
            raise CaseError(f"{what} references unknown bus {int(bid)}") from None

    gens = []
    for k, row in enumerate(gen):
        if gen.shape[1] > 7 and row[7] <= 0:
            continue
        gens.append(Generator(bus=lookup(row[0], f"generator {k}"), p_set=row[1] / base, vm_set=row[5]))

    branches = []
    for k, row in enumerate(branch):
        if branch.shape[1] > 10 and row[10] <= 0:
            continue
        tap = row[8] if branch.shape[1] > 8 and row[8] != 0 else 1.0
        branches.append(Branch(
            from_bus=lookup(row[0], f"branch {k}"), to_bus=lookup(row[1], f"branch {k}"),
            r=row[2], x=row[3],
            b_charging=row[4] if branch.shape[1] > 4 else 0.0,
            tap=tap,
            shift=np.deg2rad(row[9]) if branch.shape[1] > 9 else 0.0,
        ))
    return GridCase(base, buses, branches, gens, name=name)


def load_case(source: str | Path) -> GridCase:
    """Load a case by file path, or by bundled name (``case14``, ``case118``)."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
        name = path.stem
    else:
        name = str(source)
        try:
            text = resources.files("pfnet.cases").joinpath(f"{name}.m").read_text()
        except FileNotFoundError:
            raise CaseError(f"no case file or bundled case named {source!r}") from None
    if text.lstrip().startswith(_CANON_MAGIC):
        return loads_case(text)
    return parse_matpower(text, name=name)


# --------------------------------------------------------------------------
# canonical line format (exact round trip: floats are written with repr)

_CANON_MAGIC = "pfnet-case 1"


def dumps_case(case: GridCase) -> str:
    out = [_CANON_MAGIC, f"name {case.name}", f"base_mva {case.base_mva!r}",
           f"bus {len(case.buses)}"]
    for b in case.buses:
        out.append(" ".join([str(b.id), str(int(b.kind))] + [repr(float(v)) for v in (
            b.p_demand, b.q_demand, b.vm, b.va, b.base_kv, b.gs, b.bs)]))
    out.append(f"gen {len(case.gens)}")
    for g in case.gens:
        out.append(f"{g.bus} {float(g.p_set)!r} {float(g.vm_set)!r}")
    out.append(f"branch {len(case.branches)}")
    for br in case.branches:
        out.append(f"{br.from_bus} {br.to_bus} " + " ".join(repr(float(v)) for v in (
            br.r, br.x, br.b_charging, br.tap, br.shift)))
    return "\n".join(out) + "\n"


def loads_case(text: str) -> GridCase:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _CANON_MAGIC:
        raise CaseError("line 1: not a canonical case file")
    it = iter(enumerate(lines[1:], start=2))

    def header(key):
        lineno, line = next(it)
        parts = line.split(maxsplit=1)
        if parts[0] != key:
            raise CaseError(f"line {lineno}: expected {key!r}")
        return parts[1] if len(parts) > 1 else ""

    def rows(key, width):
        count = int(header(key))
        for _ in range(count):
            lineno, line = next(it)
            toks = line.split()
            if len(toks) != width:
                raise CaseError(f"line {lineno}: expected {width} fields, got {len(toks)}")
            yield toks

    name = header("name")
    base = float(header("base_mva"))
    buses = [Bus(int(t[0]), BusKind(int(t[1])), *map(float, t[2:])) for t in rows("bus", 9)]
    gens = [Generator(int(t[0]), float(t[1]), float(t[2])) for t in rows("gen", 3)]
    branches = [Branch(int(t[0]), int(t[1]), *map(float, t[2:])) for t in rows("branch", 7)]
    return GridCase(base, buses, branches, gens, name=name)


# --------------------------------------------------------------------------

def simplify_case(case: GridCase) -> GridCase:
    """Drop line charging, taps, phase shifts and bus shunts.

    What remains is the series-impedance-only network whose power balance is
    exactly the sum of ``V_i conj((V_j - V_i) / z_ij)`` over incident lines.
    """
    branches = [replace(br, b_charging=0.0, tap=1.0, shift=0.0) for br in case.branches]
    buses = [replace(b, gs=0.0, bs=0.0) for b in case.buses]
    return GridCase(case.base_mva, buses, branches, case.gens, name=case.name)


@dataclass(frozen=True, eq=False)
class PFGraph:
    """Node-regression view of a case.

    ``x`` and ``y`` columns are (Vm, theta, P, Q); ``mask`` marks unknown slots
    with 1 and ``x`` is zero in those slots. ``edges`` lists each undirected
    line once.
    """

    x: np.ndarray
    mask: np.ndarray
    edges: np.ndarray
    edge_attr: np.ndarray
    y: np.ndarray | None = None
    base_mva: float = 100.0

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    def with_(self, **kw) -> "PFGraph":
        return replace(self, **kw)


def merge_parallel(f, t, r, x):
    """Collapse parallel lines into one equivalent series impedance per bus pair.

    Returns ``(edges, r, x)`` with edges ordered by first appearance.
    """
    groups: dict[tuple[int, int], list[complex]] = {}
    for a, b, rr, xx in zip(f, t, r, x):
        groups.setdefault((min(a, b), max(a, b)), []).append(complex(rr, xx))
    # a lone line keeps its impedance bit for bit
    z = np.array([zs[0] if len(zs) == 1 else 1.0 / sum(1.0 / v for v in zs)
                  for zs in groups.values()], dtype=complex)
    edges = np.array(list(groups), dtype=np.int64).reshape(-1, 2)
    return edges, z.real.copy(), z.imag.copy()


def case_to_graph(case: GridCase, solution=None) -> PFGraph:
    """Encode ``case`` as a :class:`PFGraph`.

    If a solved state is given (anything with ``vm``, ``va``, ``p``, ``q``
    arrays) it becomes the label ``y``; its known slots are overwritten with
    the scheduled inputs so that labels and inputs agree exactly there.
    """
    n = case.n_bus
    kinds = case.kinds()
    vm = case.vm_setpoints()
    p, q = case.drawn_power()
    full = np.column_stack([vm, [b.va for b in case.buses], p, q])
    mask = np.empty((n, 4))
    mask[kinds == BusKind.PQ] = MASK_PATTERNS["PQ"]
    mask[kinds == BusKind.PV] = MASK_PATTERNS["PV"]
    mask[kinds == BusKind.SLACK] = MASK_PATTERNS["SLACK"]
    x = np.where(mask == 1, 0.0, full)

    edges, r, xr = merge_parallel(*case.branch_arrays())
    edge_attr = np.column_stack([r, xr])

    y = None
    if solution is not None:
        y = np.column_stack([solution.vm, solution.va, solution.p, solution.q]).astype(float)
        y = np.where(mask == 1, y, x)
    return PFGraph(x=x, mask=mask, edges=edges, edge_attr=edge_attr, y=y, base_mva=case.base_mva)

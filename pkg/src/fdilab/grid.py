"""MATPOWER case parsing and network admittance construction.

Only the subset of the MATPOWER M-file grammar used by the bundled IEEE
cases is understood: scalar assignments, numeric matrix blocks delimited by
``[`` ... ``];`` and ``%`` comments. Cell arrays and string assignments are
skipped.
"""

from __future__ import annotations

import enum
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

import numpy as np

BUNDLED_CASES = ("case14", "case30", "case39", "case57", "case118")

# Standard MATPOWER column widths; columns past these are unknown extensions.
_STANDARD_WIDTH = {"bus": 13, "branch": 13, "gen": 21}
_MIN_WIDTH = {"bus": 10, "branch": 11, "gen": 8}


class CaseFormatError(ValueError):
    """Raised when a case file cannot be turned into a valid network."""


class BusKind(enum.Enum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: BusKind
    p_load: float
    q_load: float
    g_shunt: float
    b_shunt: float
    v_setpoint: float
    base_kv: float = 0.0


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class GenRecord:
    bus: int
    pg: float
    qg: float
    vg: float
    status: bool = True


@dataclass(frozen=True)
class NetworkCase:
    """Parsed grid. Power quantities are per unit on ``base_mva``.

    Bus ids in branch and generator records are the external ids from the
    source file; :attr:`index` maps them to contiguous internal indices.
    """

    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...]
    name: str = "case"
    index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.base_mva > 0:
            raise CaseFormatError(f"base_mva must be positive, got {self.base_mva}")
        index: dict[int, int] = {}
        for pos, bus in enumerate(self.buses):
            if bus.id in index:
                raise CaseFormatError(f"duplicate bus id {bus.id}")
            if not bus.v_setpoint > 0:
                raise CaseFormatError(f"bus {bus.id}: voltage setpoint must be positive")
            index[bus.id] = pos
        slacks = [b.id for b in self.buses if b.kind is BusKind.SLACK]
        if len(slacks) != 1:
            raise CaseFormatError(f"expected exactly one slack bus, found {len(slacks)}")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in index:
                    raise CaseFormatError(f"branch references unknown bus {end}")
            if br.status and br.r == 0 and br.x == 0:
                raise CaseFormatError(
                    f"in-service branch {br.from_bus}-{br.to_bus} has zero impedance")
            if not br.tap > 0:
                raise CaseFormatError(f"branch {br.from_bus}-{br.to_bus}: tap must be positive")
        for gen in self.gens:
            if gen.bus not in index:
                raise CaseFormatError(f"generator references unknown bus {gen.bus}")
        object.__setattr__(self, "index", index)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack(self) -> int:
        """Internal index of the slack bus."""
        return next(i for i, b in enumerate(self.buses) if b.kind is BusKind.SLACK)

    @property
    def active_branches(self) -> tuple[BranchRecord, ...]:
        return tuple(br for br in self.branches if br.status)

    @property
    def n_branch(self) -> int:
        """Number of in-service branches."""
        return len(self.active_branches)

    def bus_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.buses], dtype=float)

    def branch_ends(self) -> tuple[np.ndarray, np.ndarray]:
        """Internal (from, to) indices of the in-service branches."""
        act = self.active_branches
        f = np.array([self.index[br.from_bus] for br in act], dtype=int)
        t = np.array([self.index[br.to_bus] for br in act], dtype=int)
        return f, t

    def neighbors(self) -> list[set[int]]:
        """Adjacency sets over internal indices (in-service branches only)."""
        nbrs: list[set[int]] = [set() for _ in self.buses]
        for i, k in zip(*self.branch_ends()):
            if i != k:
                nbrs[i].add(int(k))
                nbrs[k].add(int(i))
        return nbrs

    def gen_injection(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus in-service generation (P, Q), per unit."""
        pg = np.zeros(self.n_bus)
        qg = np.zeros(self.n_bus)
        for g in self.gens:
            if g.status:
                pg[self.index[g.bus]] += g.pg
                qg[self.index[g.bus]] += g.qg
        return pg, qg


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Bus admittance ``Y = G + jB`` plus the from/to branch admittances.

    ``yf`` and ``yt`` are ``L x n`` complex matrices giving branch end
    currents ``I_f = yf @ V`` for the in-service branches.
    """

    n: int
    G: np.ndarray
    B: np.ndarray
    yf: np.ndarray
    yt: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return self.G + 1j * self.B


@dataclass(frozen=True)
class BranchParams:
    from_idx: int
    to_idx: int
    g: float
    b: float
    b_charging: float
    tap: float
    shift: float

    def two_port(self) -> tuple[complex, complex, complex, complex]:
        """Standard pi-model entries (yff, yft, ytf, ytt)."""
        ys = complex(self.g, self.b)
        t = self.tap * np.exp(1j * self.shift)
        ytt = ys + 0.5j * self.b_charging
        return ytt / (t * np.conj(t)), -ys / np.conj(t), -ys / t, ytt


# ---------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    in_str = False
    for pos, ch in enumerate(line):
        if ch == "'":
            in_str = not in_str
        elif ch == "%" and not in_str:
            return line[:pos]
    return line


def _parse_row(text: str, lineno: int) -> list[float]:
    vals = []
    for tok in text.replace(",", " ").split():
        try:
            vals.append(float(tok))
        except ValueError:
            raise CaseFormatError(f"line {lineno}: cannot parse number {tok!r}") from None
    return vals


def _scan_blocks(text: str) -> tuple[dict[str, float], dict[str, list[tuple[int, list[float]]]]]:
    scalars: dict[str, float] = {}
    matrices: dict[str, list[tuple[int, list[float]]]] = {}
    current: str | None = None
    skipping = False  # inside a cell array
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if skipping:
            if "}" in line:
                skipping = False
            continue
        if current is not None:
            body, closed = line, False
            if "]" in body:
                body, rest = body.split("]", 1)
                if rest.strip() not in ("", ";"):
                    raise CaseFormatError(f"line {lineno}: unexpected text after ']'")
                closed = True
            for chunk in body.split(";"):
                if chunk.strip():
                    matrices[current].append((lineno, _parse_row(chunk, lineno)))
            if closed:
                current = None
            continue
        if line.startswith("function"):
            continue
        m = _ASSIGN.match(line)
        if m is None:
            raise CaseFormatError(f"line {lineno}: unrecognized statement {line!r}")
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            current = name
            matrices[name] = []
            rest = rhs[1:]
            if rest.strip():
                # Entire matrix (or its first rows) on the assignment line.
                closed = "]" in rest
                body = rest.split("]", 1)[0]
                for chunk in body.split(";"):
                    if chunk.strip():
                        matrices[name].append((lineno, _parse_row(chunk, lineno)))
                if closed:
                    current = None
        elif rhs.startswith("{"):
            skipping = "}" not in rhs
        elif rhs.startswith("'"):
            continue
        else:
            val = rhs.rstrip(";").strip()
            try:
                scalars[name] = float(val)
            except ValueError:
                raise CaseFormatError(f"line {lineno}: cannot parse value {val!r}") from None
    if current is not None:
        raise CaseFormatError(f"unterminated matrix block mpc.{current}")
    return scalars, matrices


def _rows(matrices, name: str) -> list[tuple[int, list[float]]]:
    if name not in matrices:
        raise CaseFormatError(f"missing {name} block")
    rows = matrices[name]
    wide = False
    for lineno, row in rows:
        if len(row) < _MIN_WIDTH[name]:
            raise CaseFormatError(
                f"line {lineno}: {name} row has {len(row)} columns, need {_MIN_WIDTH[name]}")
        wide |= len(row) > _STANDARD_WIDTH[name]
    if wide:
        warnings.warn(f"ignoring extra columns in {name} block", stacklevel=3)
    return rows


def parse_matpower_case(text: str, name: str = "case") -> NetworkCase:
    """Parse MATPOWER M-file text into a :class:`NetworkCase`.

    Loads and shunts are converted to per unit on ``baseMVA``, phase shifts
    to radians, and ``tap == 0`` is normalized to 1. Out-of-service branches
    are kept with ``status=False``.
    """
    scalars, matrices = _scan_blocks(text)
    if "baseMVA" not in scalars:
        raise CaseFormatError("missing baseMVA block")
    base = scalars["baseMVA"]
    if not base > 0:
        raise CaseFormatError(f"baseMVA must be positive, got {base}")
    bus_rows = _rows(matrices, "bus")
    branch_rows = _rows(matrices, "branch")
    gen_rows = _rows(matrices, "gen")

    gens = []
    vg_at: dict[int, float] = {}
    for _, row in gen_rows:
        on = row[7] > 0
        gen = GenRecord(bus=int(row[0]), pg=row[1] / base, qg=row[2] / base,
                        vg=row[5], status=on)
        gens.append(gen)
        if on:
            vg_at.setdefault(gen.bus, gen.vg)

    buses = []
    seen: set[int] = set()
    for lineno, row in bus_rows:
        bus_id = int(row[0])
        if bus_id in seen:
            raise CaseFormatError(f"line {lineno}: duplicate bus id {bus_id}")
        seen.add(bus_id)
        code = int(row[1])
        if code not in (1, 2, 3):
            raise CaseFormatError(f"line {lineno}: unsupported bus type {code}")
        kind = BusKind(code)
        if kind is BusKind.PV and bus_id not in vg_at:
            kind = BusKind.PQ
        vset = vg_at.get(bus_id, row[7]) if kind is not BusKind.PQ else row[7]
        buses.append(BusRecord(
            id=bus_id, kind=kind, p_load=row[2] / base, q_load=row[3] / base,
            g_shunt=row[4] / base, b_shunt=row[5] / base, v_setpoint=vset,
            base_kv=row[9]))

    branches = []
    for lineno, row in branch_rows:
        on = row[10] > 0
        if on and row[2] == 0 and row[3] == 0:
            raise CaseFormatError(
                f"line {lineno}: zero-impedance in-service branch {int(row[0])}-{int(row[1])}")
        branches.append(BranchRecord(
            from_bus=int(row[0]), to_bus=int(row[1]), r=row[2], x=row[3],
            b_charging=row[4], tap=row[8] if row[8] != 0 else 1.0,
            shift=np.deg2rad(row[9]), status=on))

    return NetworkCase(base_mva=base, buses=tuple(buses), branches=tuple(branches),
                       gens=tuple(gens), name=name)


def load_case(name_or_path: str) -> NetworkCase:
    """Load a bundled case by name (``"case14"``) or a case file by path."""
    if name_or_path in BUNDLED_CASES:
        text = resources.files("fdilab.cases").joinpath(f"{name_or_path}.m").read_text()
        return parse_matpower_case(text, name=name_or_path)
    with open(name_or_path) as fh:
        text = fh.read()
    stem = re.sub(r"\.m$", "", name_or_path.replace("\\", "/").rsplit("/", 1)[-1])
    return parse_matpower_case(text, name=stem)


def to_matpower(case: NetworkCase) -> str:
    """Serialize ``case`` to canonical M-file text readable by the parser."""
    base = case.base_mva
    out = [f"function mpc = {case.name}", f"mpc.baseMVA = {base!r};", "mpc.bus = ["]
    for b in case.buses:
        vals = [b.id, b.kind.value, b.p_load * base, b.q_load * base, b.g_shunt * base,
                b.b_shunt * base, 1, b.v_setpoint, 0, b.base_kv, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "mpc.gen = ["]
    for g in case.gens:
        vals = [g.bus, g.pg * base, g.qg * base, 0, 0, g.vg, base, int(g.status)]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out += ["];", "mpc.branch = ["]
    for br in case.branches:
        vals = [br.from_bus, br.to_bus, br.r, br.x, br.b_charging, 0, 0, 0,
                br.tap, np.rad2deg(br.shift), int(br.status), -360, 360]
        out.append("\t" + "\t".join(_fmt(v) for v in vals) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# admittance

def branch_params(case: NetworkCase) -> list[BranchParams]:
    """Series admittance ``g + jb = 1/(r + jx)`` and shunt data per in-service branch."""
    out = []
    for br in case.active_branches:
        ys = 1.0 / complex(br.r, br.x)
        out.append(BranchParams(
            from_idx=case.index[br.from_bus], to_idx=case.index[br.to_bus],
            g=ys.real, b=ys.imag, b_charging=br.b_charging, tap=br.tap, shift=br.shift))
    return out


def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    n = case.n_bus
    params = branch_params(case)
    L = len(params)
    Y = np.zeros((n, n), dtype=complex)
    yf = np.zeros((L, n), dtype=complex)
    yt = np.zeros((L, n), dtype=complex)
    for l, bp in enumerate(params):
        yff, yft, ytf, ytt = bp.two_port()
        f, t = bp.from_idx, bp.to_idx
        Y[f, f] += yff
        Y[f, t] += yft
        Y[t, f] += ytf
        Y[t, t] += ytt
        yf[l, f] += yff
        yf[l, t] += yft
        yt[l, f] += ytf
        yt[l, t] += ytt
    Y[np.diag_indices(n)] += case.bus_array("g_shunt") + 1j * case.bus_array("b_shunt")
    return AdmittanceMatrix(n=n, G=Y.real.copy(), B=Y.imag.copy(), yf=yf, yt=yt)


def incidence(case: NetworkCase) -> tuple[np.ndarray, np.ndarray]:
    """From/to bus incidence matrices (``L x n``) of the in-service branches."""
    f, t = case.branch_ends()
    L, n = len(f), case.n_bus
    cf = np.zeros((L, n))
    ct = np.zeros((L, n))
    cf[np.arange(L), f] = 1.0
    ct[np.arange(L), t] = 1.0
    return cf, ct


def describe(case: NetworkCase) -> dict:
    """Summary counts used by the CLI."""
    kinds: Iterable[BusKind] = (b.kind for b in case.buses)
    counts = {k.name: 0 for k in BusKind}
    for k in kinds:
        counts[k.name] += 1
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": case.n_bus,
        "branches": len(case.branches),
        "in_service_branches": case.n_branch,
        "gens": len(case.gens),
        "bus_kinds": counts,
        "slack_id": case.buses[case.slack].id,
    }

"""FCIDUMP ingestion, orbital partitions and second-quantized Hamiltonians.

Two-electron integrals are stored in chemist notation ``(pq|rs)``. The mapping
to the Hamiltonian

    H = Σ h_PQ a†_P a_Q + ½ Σ h_PQRS a†_P a†_Q a_R a_S + C

over spin orbitals ``P = 2p + σ`` is ``h_PQ = h1[p,q] δ(σP,σQ)`` and
``h_PQRS = (ps|qr) δ(σP,σS) δ(σQ,σR)``; it is applied only in
:func:`spin_orbital_terms`.
"""

import logging
import re
from dataclasses import dataclass, field
from itertools import product
from typing import TextIO

import numpy as np

from .errors import FcidumpError, PartitionError
from .fermion import Term

logger = logging.getLogger(__name__)

DUPLICATE_TOLERANCE = 1e-12
SYMMETRY_TOLERANCE = 1e-10

_HEADER_END = re.compile(r"(&END|/)\s*$", re.IGNORECASE)


@dataclass(frozen=True, eq=False)
class IntegralSet:
    n_orbitals: int
    n_electrons: int
    h1: np.ndarray
    h2: np.ndarray
    core: float = 0.0
    ms2: int = 0
    orbsym: tuple[int, ...] | None = None

    def __post_init__(self):
        n = self.n_orbitals
        if self.h1.shape != (n, n) or self.h2.shape != (n, n, n, n):
            raise FcidumpError(f"Integral shapes do not match NORB={n}")
        if not np.allclose(self.h1, self.h1.T, atol=SYMMETRY_TOLERANCE):
            raise FcidumpError("One-electron integrals are not symmetric")
        for axes in ((1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)):
            if not np.allclose(self.h2, self.h2.transpose(axes), atol=SYMMETRY_TOLERANCE):
                raise FcidumpError("Two-electron integrals lack 8-fold symmetry")


@dataclass(frozen=True)
class OrbitalPartition:
    n_orbitals: int
    frozen: tuple[int, ...] = ()
    inactive: tuple[int, ...] = ()
    active: tuple[int, ...] = ()
    virtual: tuple[int, ...] = ()

    @property
    def occupied(self) -> tuple[int, ...]:
        """Doubly occupied orbitals of the reference (frozen then inactive)."""
        return self.frozen + self.inactive

    @property
    def n_active(self) -> int:
        return len(self.active)

    def active_electrons(self, n_electrons: int) -> int:
        count = n_electrons - 2 * len(self.occupied)
        if count < 0 or count > 2 * self.n_active:
            raise PartitionError(
                f"{n_electrons} electrons cannot fill {len(self.occupied)} doubly occupied "
                f"and {self.n_active} active orbitals"
            )
        return count

    def active_spin_orbitals(self) -> list[int]:
        """Full-space spin orbitals of the active register, in register order."""
        return [2 * orbital + spin for orbital in self.active for spin in (0, 1)]

    def occupied_spin_orbitals(self) -> list[int]:
        return sorted(2 * orbital + spin for orbital in self.occupied for spin in (0, 1))


@dataclass(frozen=True, eq=False)
class ActiveHamiltonian:
    e_core: float
    f1: np.ndarray
    v2: np.ndarray
    n_electrons: int
    partition: OrbitalPartition | None = field(default=None)

    @property
    def n_orbitals(self) -> int:
        return self.f1.shape[0]


def _parse_header(header: str) -> dict[str, list[str]]:
    body = re.sub(r"^\s*&FCI", "", header, flags=re.IGNORECASE)
    body = _HEADER_END.sub("", body.strip())
    body = re.sub(r"\s*=\s*", "=", body).replace(",", " ")

    fields: dict[str, list[str]] = {}
    current = None
    for token in body.split():
        if "=" in token:
            name, _, value = token.partition("=")
            current = name.upper()
            fields[current] = [value] if value else []
        elif current is None:
            raise FcidumpError(f"Unexpected token in FCIDUMP header: {token!r}")
        else:
            fields[current].append(token)
    return fields


def _header_int(fields: dict[str, list[str]], name: str, default: int | None = None) -> int:
    values = fields.get(name)
    if not values:
        if default is None:
            raise FcidumpError(f"FCIDUMP header is missing {name}")
        return default
    try:
        return int(values[0])
    except ValueError as error:
        raise FcidumpError(f"FCIDUMP header field {name} is not an integer") from error


def _fortran_float(token: str) -> float:
    return float(token.replace("D", "E").replace("d", "e"))


def _set_once(store: dict, key: tuple, value: float, line: str):
    previous = store.get(key)
    if previous is not None and abs(previous - value) > DUPLICATE_TOLERANCE:
        raise FcidumpError(f"Inconsistent duplicate integral in line {line!r}")
    store[key] = value


def parse_fcidump(source: str | TextIO) -> IntegralSet:
    """Parse FCIDUMP text into an :class:`IntegralSet`.

    Orbital-energy lines (``e i 0 0 0``) are accepted and ignored.
    """
    text = source if isinstance(source, str) else source.read()
    lines = text.splitlines()

    header_lines = []
    for index, line in enumerate(lines):
        header_lines.append(line)
        if _HEADER_END.search(line.strip()):
            body = lines[index + 1:]
            break
    else:
        raise FcidumpError("FCIDUMP header is not terminated by &END or /")
    if not header_lines or not header_lines[0].lstrip().upper().startswith("&FCI"):
        raise FcidumpError("FCIDUMP must start with an &FCI namelist")

    fields = _parse_header(" ".join(header_lines))
    n_orbitals = _header_int(fields, "NORB")
    n_electrons = _header_int(fields, "NELEC")
    ms2 = _header_int(fields, "MS2", default=0)
    orbsym = tuple(int(value) for value in fields.get("ORBSYM", [])) or None
    if n_orbitals <= 0 or n_electrons < 0:
        raise FcidumpError("NORB must be positive and NELEC non-negative")
    if orbsym is not None and len(orbsym) != n_orbitals:
        raise FcidumpError("ORBSYM length differs from NORB")

    one_body: dict[tuple, float] = {}
    two_body: dict[tuple, float] = {}
    core: float | None = None
    for line in body:
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 5:
            raise FcidumpError(f"Malformed FCIDUMP data line {line!r}")
        try:
            value = _fortran_float(tokens[0])
            i, j, k, l = (int(token) for token in tokens[1:])
        except ValueError as error:
            raise FcidumpError(f"Malformed FCIDUMP data line {line!r}") from error
        if any(index < 0 or index > n_orbitals for index in (i, j, k, l)):
            raise FcidumpError(f"Orbital index out of range in line {line!r}")

        if i and j and k and l:
            p, q, r, s = i - 1, j - 1, k - 1, l - 1
            pair_pq, pair_rs = (max(p, q), min(p, q)), (max(r, s), min(r, s))
            _set_once(two_body, max(pair_pq, pair_rs) + min(pair_pq, pair_rs), value, line)
        elif i and j and not k and not l:
            _set_once(one_body, (max(i, j) - 1, min(i, j) - 1), value, line)
        elif not i and not j and not k and not l:
            if core is not None and abs(core - value) > DUPLICATE_TOLERANCE:
                raise FcidumpError(f"Inconsistent duplicate core energy in line {line!r}")
            core = value
        elif i and not j and not k and not l:
            logger.debug("Ignoring orbital energy line", extra={"line": line})
        else:
            raise FcidumpError(f"Unsupported index pattern in line {line!r}")

    h1 = np.zeros((n_orbitals, n_orbitals))
    for (p, q), value in one_body.items():
        h1[p, q] = h1[q, p] = value

    h2 = np.zeros((n_orbitals,) * 4)
    for (p, q, r, s), value in two_body.items():
        for a, b in ((p, q), (q, p)):
            for c, d in ((r, s), (s, r)):
                h2[a, b, c, d] = value
                h2[c, d, a, b] = value

    return IntegralSet(
        n_orbitals=n_orbitals,
        n_electrons=n_electrons,
        h1=h1,
        h2=h2,
        core=core or 0.0,
        ms2=ms2,
        orbsym=orbsym,
    )


def write_fcidump(integrals: IntegralSet) -> str:
    """Serialize ``integrals`` listing each symmetry-unique entry once."""
    n = integrals.n_orbitals
    orbsym = integrals.orbsym or (1,) * n
    lines = [
        f" &FCI NORB={n},NELEC={integrals.n_electrons},MS2={integrals.ms2},",
        "  ORBSYM=" + ",".join(str(label) for label in orbsym) + ",",
        "  ISYM=1,",
        " &END",
    ]

    def entry(value: float, *indices: int) -> str:
        return f"{value: .17e} " + " ".join(f"{index:3d}" for index in indices)

    for p, q, r, s in product(range(n), repeat=4):
        if p >= q and r >= s and (p, q) >= (r, s) and integrals.h2[p, q, r, s] != 0.0:
            lines.append(entry(integrals.h2[p, q, r, s], p + 1, q + 1, r + 1, s + 1))
    for p in range(n):
        for q in range(p + 1):
            if integrals.h1[p, q] != 0.0:
                lines.append(entry(integrals.h1[p, q], p + 1, q + 1, 0, 0))
    lines.append(entry(integrals.core, 0, 0, 0, 0))
    return "\n".join(lines) + "\n"


def partition_orbitals(
    n_orbitals: int,
    frozen: list[int] | tuple[int, ...] = (),
    inactive: list[int] | tuple[int, ...] = (),
    active: list[int] | tuple[int, ...] = (),
) -> OrbitalPartition:
    seen: set[int] = set()
    for name, orbitals in (("frozen", frozen), ("inactive", inactive), ("active", active)):
        for orbital in orbitals:
            if not 0 <= orbital < n_orbitals:
                raise PartitionError(f"{name} orbital {orbital} outside [0, {n_orbitals})")
            if orbital in seen:
                raise PartitionError(f"Orbital {orbital} appears in more than one space")
            seen.add(orbital)
    virtual = tuple(orbital for orbital in range(n_orbitals) if orbital not in seen)
    return OrbitalPartition(
        n_orbitals=n_orbitals,
        frozen=tuple(frozen),
        inactive=tuple(inactive),
        active=tuple(active),
        virtual=virtual,
    )


def closed_shell_energy(integrals: IntegralSet, occupied: list[int] | tuple[int, ...]) -> float:
    """Energy of the determinant doubly occupying ``occupied`` spatial orbitals."""
    idx = np.asarray(occupied, dtype=int)
    if idx.size == 0:
        return float(integrals.core)
    h1 = integrals.h1[np.ix_(idx, idx)]
    coulomb = np.einsum("iijj->", integrals.h2[np.ix_(idx, idx, idx, idx)])
    exchange = np.einsum("ijji->", integrals.h2[np.ix_(idx, idx, idx, idx)])
    return float(integrals.core + 2.0 * np.trace(h1) + 2.0 * coulomb - exchange)


def fold_core(integrals: IntegralSet, partition: OrbitalPartition) -> ActiveHamiltonian:
    if partition.n_orbitals != integrals.n_orbitals:
        raise PartitionError("Partition and integral set disagree on the orbital count")
    occupied = np.asarray(partition.occupied, dtype=int)
    active = np.asarray(partition.active, dtype=int)

    e_core = closed_shell_energy(integrals, occupied)
    f1 = integrals.h1[np.ix_(active, active)].copy()
    if occupied.size:
        coulomb = np.einsum("uvii->uv", integrals.h2[np.ix_(active, active, occupied, occupied)])
        exchange = np.einsum("uiiv->uv", integrals.h2[np.ix_(active, occupied, occupied, active)])
        f1 += 2.0 * coulomb - exchange
    v2 = integrals.h2[np.ix_(active, active, active, active)].copy()

    return ActiveHamiltonian(
        e_core=e_core,
        f1=f1,
        v2=v2,
        n_electrons=partition.active_electrons(integrals.n_electrons),
        partition=partition,
    )


def spin_orbital_terms(
    hamiltonian: ActiveHamiltonian | IntegralSet, include_constant: bool = True
) -> list[Term]:
    """Fermionic terms of the Hamiltonian over interleaved spin orbitals.

    One-body terms come first as a†_P a_Q, then a†_P a†_Q a_R a_S with weight
    ½(ps|qr); the scalar (core or folded core) leads the list when requested.
    """
    if isinstance(hamiltonian, ActiveHamiltonian):
        h1, h2, constant = hamiltonian.f1, hamiltonian.v2, hamiltonian.e_core
    else:
        h1, h2, constant = hamiltonian.h1, hamiltonian.h2, hamiltonian.core
    n = h1.shape[0]

    terms: list[Term] = []
    if include_constant and constant != 0.0:
        terms.append((float(constant), ()))
    for p, q in product(range(n), repeat=2):
        if h1[p, q] != 0.0:
            for spin in (0, 1):
                terms.append((float(h1[p, q]), ((2 * p + spin, True), (2 * q + spin, False))))
    for p, q, r, s in product(range(n), repeat=4):
        value = h2[p, s, q, r]
        if value == 0.0:
            continue
        for sigma, tau in product((0, 1), repeat=2):
            big_p, big_q = 2 * p + sigma, 2 * q + tau
            big_r, big_s = 2 * r + tau, 2 * s + sigma
            if big_p == big_q or big_r == big_s:
                continue
            terms.append(
                (0.5 * float(value), ((big_p, True), (big_q, True), (big_r, False), (big_s, False)))
            )
    return terms

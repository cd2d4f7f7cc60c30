"""Exhaustive checks of the equivariance construction on small finite domains.

Given a finite group G acting on a finite set X' (the closure of base points
X under the action) and an encoder f tabulated on X', the checker

* scans every pair of decompositions ``(g, x)``, ``(g', x')`` and reports the
  first one with ``f(T_g x) == f(T_g' x')`` but ``(g, x) != (g', x')``;
* when no such pair exists, builds ``T'(g, s) = f(T_g T_g' x')`` where
  ``s = f(T_g' x')`` is the unique decomposition of ``s``;
* verifies identity, compositionality, commuting with the group action and
  non-triviality of ``T'`` by enumeration.

Composition convention throughout: ``compose[i][j]`` is the element that
applies ``j`` first and ``i`` second.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import torch

from essl.groups import TransformationGroup, get_group


class AssumptionViolated(ValueError):
    pass


@dataclass(frozen=True)
class FiniteGroupTable:
    """Multiplication table of a finite group with element 0 the identity."""

    name: str
    compose: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.compose)
        if n == 0 or any(len(row) != n for row in self.compose):
            raise ValueError("composition table must be square and nonempty")
        if any(self.compose[0][j] != j or self.compose[j][0] != j for j in range(n)):
            raise ValueError("element 0 must be the identity")

    @property
    def order(self) -> int:
        return len(self.compose)

    def inverse(self, i: int) -> int:
        return next(j for j in range(self.order) if self.compose[i][j] == 0)

    def element_order(self, i: int) -> int:
        k, cur = 1, i
        while cur != 0:
            cur, k = self.compose[i][cur], k + 1
        return k

    @classmethod
    def from_group(cls, group: TransformationGroup | str) -> "FiniteGroupTable":
        group = get_group(group)
        if not group.is_finite or not group.is_group:
            raise ValueError(f"{group.name} is not a finite group")
        n = int(group.order)
        return cls(group.name, tuple(tuple(group.compose_index(i, j) for j in range(n)) for i in range(n)))

    @classmethod
    def trivial(cls) -> "FiniteGroupTable":
        return cls("trivial", ((0,),))

    @classmethod
    def cyclic(cls, n: int) -> "FiniteGroupTable":
        return cls(f"cyclic_{n}", tuple(tuple((i + j) % n for j in range(n)) for i in range(n)))


Action = Callable[[int, Hashable], Hashable]


@dataclass
class FiniteDomain:
    """Base points X, a group acting on them and an encoder tabulated on the closure X'."""

    base_points: Sequence[Hashable]
    group: FiniteGroupTable
    act: Action
    encoder: dict | Callable[[Hashable], Hashable]
    elements_Xprime: list = field(init=False)
    encoder_table: dict = field(init=False)

    def __post_init__(self):
        seen, closure = set(), []
        for x in self.base_points:
            for g in range(self.group.order):
                y = self.act(g, x)
                if y not in seen:
                    seen.add(y)
                    closure.append(y)
        for y in closure:  # X' must be closed under the action
            for g in range(self.group.order):
                if self.act(g, y) not in seen:
                    raise ValueError(f"action leaves X' at element {g}; is the action closed?")
        self.elements_Xprime = closure
        if callable(self.encoder):
            self.encoder_table = {y: self.encoder(y) for y in closure}
        else:
            missing = [y for y in closure if y not in self.encoder]
            if missing:
                raise ValueError(f"encoder table is not total on X' (missing {missing[0]!r})")
            self.encoder_table = {y: self.encoder[y] for y in closure}

    def f(self, y):
        return self.encoder_table[y]

    def pairs(self):
        """All decompositions (g, x) in canonical scan order: base points outer, group elements inner."""
        return [(g, x) for x in self.base_points for g in range(self.group.order)]


@dataclass
class PropositionReport:
    assumption_holds: bool
    violating_witness: tuple | None = None
    identity_ok: bool | None = None
    compositionality_ok: bool | None = None
    commuting_ok: bool | None = None
    nontrivial: bool | None = None
    regular_on_orbits: bool | None = None

    @property
    def all_true(self) -> bool:
        return all(
            v is True for v in (self.assumption_holds, self.identity_ok, self.compositionality_ok,
                                self.commuting_ok, self.nontrivial)
        )

    def to_text(self) -> str:
        lines = []
        for k, v in self.__dict__.items():
            lines.append(f"{k}: {'none' if v is None else repr(v) if k == 'violating_witness' else str(v).lower()}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PropositionReport":
        import ast

        kv = dict(line.split(": ", 1) for line in text.strip().splitlines())
        out = {}
        for k, v in kv.items():
            if v == "none":
                out[k] = None
            elif k == "violating_witness":
                out[k] = ast.literal_eval(v)
            else:
                out[k] = v == "true"
        return cls(**out)


def check_assumption(dom: FiniteDomain) -> PropositionReport:
    """Scan all decompositions; report the first collision of outputs from distinct (g, x)."""
    first: dict = {}
    for g, x in dom.pairs():
        s = dom.f(dom.act(g, x))
        if s in first and first[s] != (g, x):
            return PropositionReport(False, (first[s], (g, x)))
        first.setdefault(s, (g, x))
    return PropositionReport(True)


def construct_induced_action(dom: FiniteDomain) -> dict:
    """Table ``{(g, s): T'(g, s)}`` over G x S, S the set of encoder outputs on X'."""
    report = check_assumption(dom)
    if not report.assumption_holds:
        raise AssumptionViolated(f"decompositions {report.violating_witness} share an output")
    table = {}
    for gp, xp in dom.pairs():
        s = dom.f(dom.act(gp, xp))
        for g in range(dom.group.order):
            # T_g T_g' x' = T_{g g'} x' by the action law
            table[(g, s)] = dom.f(dom.act(dom.group.compose[g][gp], xp))
    return table


def _orbits(table: dict, order: int) -> list[list]:
    states = sorted({s for _, s in table}, key=repr)
    seen, orbits = set(), []
    for s in states:
        if s in seen:
            continue
        orbit = []
        for g in range(order):
            t = table[(g, s)]
            if t not in seen:
                seen.add(t)
                orbit.append(t)
        orbits.append(orbit)
    return orbits


def _cycle_type(perm: dict) -> Counter:
    seen, lengths = set(), Counter()
    for start in perm:
        if start in seen:
            continue
        n, cur = 0, start
        while cur not in seen:
            seen.add(cur)
            cur, n = perm[cur], n + 1
        lengths[n] += 1
    return lengths


def is_regular_on_orbits(group: FiniteGroupTable, table: dict) -> bool:
    """Each orbit has |G| points and every element permutes it like left multiplication on G."""
    n = group.order
    for orbit in _orbits(table, n):
        if len(orbit) != n:
            return False
        for g in range(n):
            perm = {s: table[(g, s)] for s in orbit}
            regular = {h: group.compose[g][h] for h in range(n)}
            if _cycle_type(perm) != _cycle_type(regular):
                return False
    return True


def verify_proposition(dom: FiniteDomain) -> PropositionReport:
    report = check_assumption(dom)
    if not report.assumption_holds:
        return report
    table = construct_induced_action(dom)
    grp = dom.group
    states = sorted({s for _, s in table}, key=repr)
    report.identity_ok = all(table[(0, s)] == s for s in states)
    report.compositionality_ok = all(
        table[(g, table[(h, s)])] == table[(grp.compose[g][h], s)]
        for g, h in itertools.product(range(grp.order), repeat=2) for s in states
    )
    report.commuting_ok = all(
        dom.f(dom.act(g, y)) == table[(g, dom.f(y))] for g in range(grp.order) for y in dom.elements_Xprime
    )
    # at least one moved point certifies non-triviality
    report.nontrivial = any(table[(g, s)] != s for g in range(grp.order) for s in states)
    report.regular_on_orbits = is_regular_on_orbits(grp, table)
    return report


# ---------------------------------------------------------------------------
# constructed domains


def free_domain(group: FiniteGroupTable, num_orbits: int, encoder: Callable | None = None) -> FiniteDomain:
    """Abstract points ``(orbit, h)`` with ``g . (o, h) = (o, g h)``; one base point per orbit."""
    def act(g, p):
        return (p[0], group.compose[g][p[1]])

    return FiniteDomain([(o, 0) for o in range(num_orbits)], group, act, encoder or (lambda p: p))


def _tensor_key(x: torch.Tensor) -> tuple:
    x = x.detach().contiguous().cpu()
    return (tuple(x.shape), str(x.dtype), x.numpy().tobytes())


def cluster_features(features: torch.Tensor, tol: float = 1e-6) -> list[int]:
    """Label rows so that rows within ``tol`` (L2) of an earlier representative share its label."""
    reps: list[torch.Tensor] = []
    labels = []
    for row in features.double():
        for i, r in enumerate(reps):
            if torch.linalg.vector_norm(row - r) <= tol:
                labels.append(i)
                break
        else:
            labels.append(len(reps))
            reps.append(row)
    return labels


def image_domain(images: torch.Tensor, group: TransformationGroup | str,
                 encoder: Callable[[torch.Tensor], torch.Tensor] | None = None, tol: float = 1e-6) -> FiniteDomain:
    """Bridge from real tensors to abstract points.

    Images are identified by their exact bytes and numbered in order of first
    appearance, so base image ``i`` is point ``i`` when the images are
    distinct.  Encoder outputs closer than
    ``tol`` are treated as equal.  With no encoder the flattened image is used,
    which is injective.
    """
    group = get_group(group)
    table = FiniteGroupTable.from_group(group)
    ids: dict = {}
    store: list[torch.Tensor] = []

    def key_of(x):
        k = _tensor_key(x)
        if k not in ids:
            ids[k] = len(store)
            store.append(x)
        return ids[k]

    def act(g, k):
        return key_of(group.apply(group.element(g), store[k]))

    base = [key_of(x) for x in images]
    dom = FiniteDomain(base, table, act, lambda k: k)
    pts = dom.elements_Xprime
    batch = torch.stack([store[k] for k in pts])
    with torch.no_grad():
        feats = encoder(batch) if encoder is not None else batch.flatten(1)
    labels = cluster_features(feats.reshape(len(pts), -1), tol)
    dom.encoder_table = dict(zip(pts, labels))
    return dom

"""SMILES parsing, canonical forms, scaffolds, fingerprints, and scaffold splits.

The parser is a pure grammar: lowercase atoms are taken as aromatic exactly
as written, no aromaticity perception or kekulization is attempted, and
valence is not checked unless ``strict`` is requested.  Canonicalization is
self-consistent (one string per molecular graph under this toolkit) and
deliberately makes no attempt to match any external toolkit's output.
"""

from __future__ import annotations

import random
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import xxhash

# Identifier recorded in artifact metadata so dedup runs are comparable
# across machines.
HASH_ALGORITHM_ID = "xxh128(canonical-smiles-v1)"

ORGANIC_SUBSET = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
# Aromatic symbols accepted inside brackets (OpenSMILES set).
AROMATIC_BRACKET = AROMATIC_ORGANIC | {"se", "as", "te", "si"}

PERIODIC_TABLE = set(
    """H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co
    Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te
    I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir
    Pt Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No
    Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og""".split()
)

# Default maximum valences for the optional strict mode.
VALENCE_TABLE = {"B": 3, "C": 4, "N": 3, "O": 2, "P": 5, "S": 6, "F": 1,
                 "Cl": 1, "Br": 1, "I": 1, "H": 1}

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
_BOND_ORDER_VALUE = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}
_BOND_RANK = {SINGLE: 0, AROMATIC: 1, DOUBLE: 2, TRIPLE: 3}


class SmilesError(ValueError):
    """Base class for SMILES parse and serialization failures."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class EmptyInput(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class UnclosedBracket(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class DanglingBond(SmilesError):
    pass


class IllegalCharacter(SmilesError):
    pass


class InvalidRoot(ValueError):
    pass


class ValenceError(SmilesError):
    """Raised in strict mode when an atom exceeds its table valence."""


class CanonicalizationOverflow(RuntimeError):
    """Tie-breaking search exceeded its budget (pathologically symmetric graph)."""


class UnparseableRecord(UserWarning):
    """A dataset row whose SMILES failed to parse; the row is skipped."""


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int | None = None
    isotope: int | None = None
    chirality: str | None = None  # "@" or "@@", carried but never canonicalized


@dataclass
class Bond:
    a: int
    b: int
    order: str = SINGLE
    stereo_mark: str | None = None  # "up" (/) or "down" (\), relative to a->b


@dataclass
class MolGraph:
    """A parsed molecule: atoms in first-occurrence order plus bond list.

    ``atom_spans`` and ``bond_symbol_pos`` record source-string provenance
    (character spans of atom tokens, positions of explicit bond symbols)
    when the graph came from :func:`parse_smiles`; they are what make
    token-to-atom attribution mapping possible.
    """

    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)
    ring_atom: list[bool] = field(default_factory=list)
    ring_bond: list[bool] = field(default_factory=list)
    atom_spans: list[tuple[int, int]] | None = None
    bond_symbol_pos: list[int | None] | None = None

    def __post_init__(self):
        if not self.ring_atom and self.atoms:
            self._finalize()

    def _finalize(self):
        self.ring_bond = _non_bridge_edges(len(self.atoms), self.bonds)
        self.ring_atom = [False] * len(self.atoms)
        for bond, in_ring in zip(self.bonds, self.ring_bond):
            if in_ring:
                self.ring_atom[bond.a] = True
                self.ring_atom[bond.b] = True

    @property
    def num_atoms(self):
        return len(self.atoms)

    def neighbors(self, i):
        out = []
        for k, bond in enumerate(self.bonds):
            if bond.a == i:
                out.append((bond.b, k))
            elif bond.b == i:
                out.append((bond.a, k))
        return out

    def degree(self, i):
        return sum(1 for bond in self.bonds if i in (bond.a, bond.b))

    def adjacency(self):
        adj = [[] for _ in range(len(self.atoms))]
        for k, bond in enumerate(self.bonds):
            adj[bond.a].append((bond.b, k))
            adj[bond.b].append((bond.a, k))
        return adj

    def components(self):
        """Connected components as lists of atom indices (ascending)."""
        seen = [False] * len(self.atoms)
        adj = self.adjacency()
        comps = []
        for start in range(len(self.atoms)):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                v = stack.pop()
                comp.append(v)
                for w, _ in adj[v]:
                    if not seen[w]:
                        seen[w] = True
                        stack.append(w)
            comps.append(sorted(comp))
        return comps


def _non_bridge_edges(n, bonds):
    """Flag each bond that lies on some cycle (i.e. is not a bridge).

    Iterative Tarjan bridge-finding; an edge is on a cycle iff it is not a
    bridge, and an atom is a ring member iff it has an incident cycle edge.
    """
    adj = [[] for _ in range(n)]
    for k, bond in enumerate(bonds):
        adj[bond.a].append((bond.b, k))
        adj[bond.b].append((bond.a, k))
    disc = [-1] * n
    low = [0] * n
    is_bridge = [False] * len(bonds)
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        stack = [(root, -1, iter(adj[root]))]
        disc[root] = low[root] = timer
        timer += 1
        while stack:
            v, parent_edge, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == parent_edge:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, k, iter(adj[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if not advanced:
                stack.pop()
                if stack:
                    u = stack[-1][0]
                    low[u] = min(low[u], low[v])
                    if low[v] > disc[u]:
                        is_bridge[parent_edge] = True
    return [not b for b in is_bridge]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

def _parse_bracket_atom(text, start):
    """Parse a bracket atom starting at text[start] == '['.

    Returns (Atom, end_exclusive).
    """
    end = text.find("]", start + 1)
    if end == -1:
        raise UnclosedBracket("bracket atom never closed", start)
    body = text[start + 1:end]
    pos = 0
    isotope = None
    while pos < len(body) and body[pos].isdigit():
        pos += 1
    if pos:
        isotope = int(body[:pos])
        if isotope < 1:
            raise UnknownElement(f"isotope must be >= 1, got {isotope}", start)
    # Element symbol: one uppercase + optional lowercase, or a lowercase
    # aromatic symbol (possibly two letters, e.g. [se]).
    element = None
    aromatic = False
    rest = body[pos:]
    if rest[:2] and rest[:2] in AROMATIC_BRACKET:
        element, aromatic = rest[:2], True
        pos += 2
    elif rest[:1] in AROMATIC_BRACKET:
        element, aromatic = rest[:1], True
        pos += 1
    elif rest[:1].isupper():
        if len(rest) > 1 and rest[1].islower() and rest[:2] in PERIODIC_TABLE:
            element = rest[:2]
            pos += 2
        else:
            element = rest[:1]
            pos += 1
    if element is None:
        raise UnknownElement(f"no element symbol in bracket atom [{body}]", start)
    lookup = element.capitalize() if aromatic else element
    if lookup not in PERIODIC_TABLE:
        raise UnknownElement(f"unknown element {element!r}", start)
    chirality = None
    explicit_h = None
    charge = 0
    while pos < len(body):
        ch = body[pos]
        if ch == "@":
            if pos + 1 < len(body) and body[pos + 1] == "@":
                chirality = "@@"
                pos += 2
            else:
                chirality = "@"
                pos += 1
        elif ch == "H":
            pos += 1
            digits = ""
            while pos < len(body) and body[pos].isdigit():
                digits += body[pos]
                pos += 1
            explicit_h = int(digits) if digits else 1
        elif ch in "+-":
            sign = 1 if ch == "+" else -1
            pos += 1
            run = 1
            while pos < len(body) and body[pos] == ch:
                run += 1
                pos += 1
            digits = ""
            while pos < len(body) and body[pos].isdigit():
                digits += body[pos]
                pos += 1
            charge = sign * (int(digits) if digits else run)
        elif ch == ":":
            # Atom-class label: accepted and discarded.
            pos += 1
            while pos < len(body) and body[pos].isdigit():
                pos += 1
        else:
            raise IllegalCharacter(f"unexpected {ch!r} in bracket atom", start + 1 + pos)
    atom = Atom(element=element.capitalize() if aromatic else element,
                aromatic=aromatic, formal_charge=charge,
                explicit_h=explicit_h, isotope=isotope, chirality=chirality)
    # Bracket aromatic symbols keep their written (lowercase-derived) element
    # capitalized for table lookups while the aromatic flag records case.
    return atom, end + 1


_BOND_CHARS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}


def parse_smiles(text, strict=False):
    """Parse a SMILES string into a :class:`MolGraph`.

    Atoms appear in first-occurrence order; implicit bonds are materialized
    (aromatic when both endpoints are aromatic, single otherwise).  With
    ``strict=True`` atoms exceeding the fixed valence table are rejected.
    """
    if not isinstance(text, str):
        raise TypeError("SMILES must be a string")
    if text == "":
        raise EmptyInput("empty SMILES")
    if not text.isascii():
        raise IllegalCharacter("SMILES must be ASCII")

    atoms: list[Atom] = []
    bonds: list[Bond] = []
    atom_spans: list[tuple[int, int]] = []
    bond_symbol_pos: list[int | None] = []
    anchor = None
    branch_stack: list[int | None] = []
    pending: tuple[str, str | None, int] | None = None  # (order, stereo, char pos)
    open_rings: dict[int, tuple[int, tuple | None, int]] = {}

    def add_atom(atom, span):
        nonlocal anchor, pending
        atoms.append(atom)
        atom_spans.append(span)
        idx = len(atoms) - 1
        if anchor is not None:
            if pending is None:
                order = AROMATIC if atoms[anchor].aromatic and atom.aromatic else SINGLE
                bonds.append(Bond(anchor, idx, order))
                bond_symbol_pos.append(None)
            else:
                order, stereo, cpos = pending
                bonds.append(Bond(anchor, idx, order, stereo_mark=stereo))
                bond_symbol_pos.append(cpos)
        pending = None
        anchor = idx

    def open_or_close_ring(num, pos):
        nonlocal pending
        if anchor is None:
            raise SmilesError(f"ring closure {num} before any atom", pos)
        if num in open_rings:
            other, opening_bond, opening_pos = open_rings.pop(num)
            if other == anchor:
                raise SmilesError(f"ring closure {num} bonds an atom to itself", pos)
            if opening_bond is not None and pending is not None and \
                    opening_bond[0] != pending[0]:
                raise SmilesError(f"conflicting bond orders on ring closure {num}", pos)
            use = pending or opening_bond
            if use is None:
                order = AROMATIC if atoms[other].aromatic and atoms[anchor].aromatic else SINGLE
                bonds.append(Bond(other, anchor, order))
                bond_symbol_pos.append(None)
            else:
                order, stereo, cpos = use
                bonds.append(Bond(other, anchor, order, stereo_mark=stereo))
                bond_symbol_pos.append(cpos)
            pending = None
        else:
            open_rings[num] = (anchor, pending, pos)
            pending = None

    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "[":
            atom, end = _parse_bracket_atom(text, i)
            add_atom(atom, (i, end))
            i = end
        elif ch.isupper():
            two = text[i:i + 2]
            if two in ("Cl", "Br"):
                add_atom(Atom(element=two), (i, i + 2))
                i += 2
            elif ch in ORGANIC_SUBSET:
                add_atom(Atom(element=ch), (i, i + 1))
                i += 1
            else:
                raise UnknownElement(
                    f"element {ch!r} must be written in brackets", i)
        elif ch in AROMATIC_ORGANIC:
            add_atom(Atom(element=ch.upper(), aromatic=True), (i, i + 1))
            i += 1
        elif ch in _BOND_CHARS:
            if pending is not None:
                raise DanglingBond(f"bond symbol {ch!r} follows an unused bond", i)
            pending = (_BOND_CHARS[ch], None, i)
            i += 1
        elif ch == "/" or ch == "\\":
            if pending is not None:
                raise DanglingBond(f"stereo mark {ch!r} follows an unused bond", i)
            pending = (SINGLE, "up" if ch == "/" else "down", i)
            i += 1
        elif ch == "(":
            if anchor is None:
                raise SmilesError("branch opened before any atom", i)
            branch_stack.append(anchor)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unmatched ')'", i)
            if pending is not None:
                raise DanglingBond("bond symbol before ')'", i)
            anchor = branch_stack.pop()
            i += 1
        elif ch.isdigit():
            open_or_close_ring(int(ch), i)
            i += 1
        elif ch == "%":
            if i + 2 >= n or not text[i + 1:i + 3].isdigit():
                raise IllegalCharacter("'%' must be followed by two digits", i)
            open_or_close_ring(int(text[i + 1:i + 3]), i)
            i += 3
        elif ch == ".":
            if pending is not None:
                raise DanglingBond("bond symbol before '.'", i)
            anchor = None
            i += 1
        else:
            raise IllegalCharacter(f"unexpected character {ch!r}", i)

    if pending is not None:
        raise DanglingBond("trailing bond symbol with no following atom", n - 1)
    if open_rings:
        nums = sorted(open_rings)
        raise UnclosedRing(f"ring closure digit(s) never closed: {nums}")
    if branch_stack:
        raise SmilesError("unclosed '('")
    if not atoms:
        raise EmptyInput("SMILES contains no atoms")

    g = MolGraph(atoms=atoms, bonds=bonds, atom_spans=atom_spans,
                 bond_symbol_pos=bond_symbol_pos)
    if strict:
        _check_valence(g)
    return g


def _check_valence(g):
    for i, atom in enumerate(g.atoms):
        limit = VALENCE_TABLE.get(atom.element)
        if limit is None:
            continue
        total = sum(_BOND_ORDER_VALUE[g.bonds[k].order] for _, k in g.neighbors(i))
        total += atom.explicit_h or 0
        limit += max(atom.formal_charge, 0)
        if total > limit + 1e-9:
            raise ValenceError(
                f"atom {i} ({atom.element}) has valence {total} > {limit}")


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def _atom_token(atom, include_stereo=True):
    needs_bracket = (
        atom.formal_charge != 0
        or atom.explicit_h is not None
        or atom.isotope is not None
        or (include_stereo and atom.chirality is not None)
        or (atom.aromatic and atom.element.lower() not in AROMATIC_ORGANIC)
        or (not atom.aromatic and atom.element not in ORGANIC_SUBSET)
    )
    symbol = atom.element.lower() if atom.aromatic else atom.element
    if not needs_bracket:
        return symbol
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(symbol)
    if include_stereo and atom.chirality:
        parts.append(atom.chirality)
    if atom.explicit_h is not None:
        # H0 is written out so that [CH0] and [C] stay distinct on reparse.
        parts.append("H" if atom.explicit_h == 1 else f"H{atom.explicit_h}")
    charge = atom.formal_charge
    if charge == 1:
        parts.append("+")
    elif charge == -1:
        parts.append("-")
    elif charge > 1:
        parts.append(f"+{charge}")
    elif charge < -1:
        parts.append(f"-{-charge}")
    parts.append("]")
    return "".join(parts)


def _bond_token(bond, from_atom, g, include_stereo=True):
    a_arom = g.atoms[bond.a].aromatic
    b_arom = g.atoms[bond.b].aromatic
    if bond.order == SINGLE:
        if include_stereo and bond.stereo_mark:
            mark = bond.stereo_mark
            if from_atom != bond.a:  # traversed against parse direction
                mark = "down" if mark == "up" else "up"
            return "/" if mark == "up" else "\\"
        return "-" if (a_arom and b_arom) else ""
    if bond.order == AROMATIC:
        return "" if (a_arom and b_arom) else ":"
    return "=" if bond.order == DOUBLE else "#"


def _serialize_component(g, root, order_key, include_stereo=True):
    """Depth-first SMILES text for the component containing ``root``.

    ``order_key(parent, child_list)`` returns the child visit order, where
    each child is an (atom, bond index) pair.  Non-tree edges become ring
    closure digits attached to both endpoints, opened at the endpoint
    written first.
    """
    adj = g.adjacency()
    visit_order: list[int] = []
    visit_index: dict[int, int] = {}
    tree_children: dict[int, list[tuple[int, int]]] = {}
    ring_bonds_at: dict[int, list[int]] = {}
    edge_seen: set[int] = set()

    def explore(v, incoming):
        visit_index[v] = len(visit_order)
        visit_order.append(v)
        tree_children[v] = []
        ring_bonds_at.setdefault(v, [])
        pairs = [(w, k) for w, k in adj[v] if k != incoming]
        for w, k in order_key(v, pairs):
            if k in edge_seen:
                continue
            if w in visit_index:
                edge_seen.add(k)
                ring_bonds_at[v].append(k)
                ring_bonds_at.setdefault(w, []).append(k)
            else:
                edge_seen.add(k)
                tree_children[v].append((w, k))
                explore(w, k)

    explore(root, None)

    # Digit numbers follow written order, so closed digits can be reused.
    free_digits = list(range(1, 100))
    digit_of: dict[int, int] = {}
    emission: dict[int, list[str]] = {}
    for v in visit_order:
        toks = []
        for k in ring_bonds_at[v]:
            if k not in digit_of:
                num = free_digits.pop(0)
                digit_of[k] = num
                bond_tok = _bond_token(g.bonds[k], v, g, include_stereo)
                toks.append(bond_tok + (str(num) if num < 10 else f"%{num:02d}"))
            else:
                num = digit_of.pop(k)
                free_digits.insert(0, num)
                free_digits.sort()
                toks.append(str(num) if num < 10 else f"%{num:02d}")
        emission[v] = toks

    out = []

    def write(v):
        out.append(_atom_token(g.atoms[v], include_stereo))
        out.extend(emission[v])
        kids = tree_children[v]
        for i, (w, k) in enumerate(kids):
            last = i == len(kids) - 1
            if not last:
                out.append("(")
            out.append(_bond_token(g.bonds[k], v, g, include_stereo))
            write(w)
            if not last:
                out.append(")")

    write(root)
    return "".join(out), set(visit_index)


def write_smiles(g, root=0, rng=None, include_stereo=True):
    """Serialize a graph to SMILES by depth-first traversal from ``root``.

    ``rng`` (a ``random.Random``) shuffles neighbor visit order, producing
    alternative renderings of the same molecule; with ``rng=None`` neighbors
    are visited in ascending atom-index order.  Components other than the
    root's follow, dot-separated.
    """
    if not g.atoms:
        return ""
    if not (0 <= root < len(g.atoms)):
        raise InvalidRoot(f"root {root} out of range for {len(g.atoms)} atoms")

    if rng is None:
        def order_key(parent, pairs):
            return sorted(pairs)
    else:
        def order_key(parent, pairs):
            pairs = list(pairs)
            rng.shuffle(pairs)
            return pairs

    pieces = []
    text, visited = _serialize_component(g, root, order_key, include_stereo)
    pieces.append(text)
    remaining = [c for c in g.components() if c[0] not in visited and not (set(c) & visited)]
    for comp in remaining:
        start = rng.choice(comp) if rng is not None else comp[0]
        text, seen = _serialize_component(g, start, order_key, include_stereo)
        pieces.append(text)
    return ".".join(pieces)


# ---------------------------------------------------------------------------
# Canonicalization
# ---------------------------------------------------------------------------

def _initial_invariants(g, atoms):
    degree = [0] * len(g.atoms)
    for bond in g.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1
    inv = {}
    for i in atoms:
        a = g.atoms[i]
        inv[i] = (a.element, degree[i], a.formal_charge, a.aromatic,
                  g.ring_atom[i], a.explicit_h if a.explicit_h is not None else -1,
                  a.isotope or 0)
    return inv


def _refine(g, atoms, seed_ranks):
    """Weisfeiler-Leman style refinement of ``seed_ranks`` over ``atoms``.

    Ranks are dense integers; refinement stops when the number of classes
    no longer grows.  Exact tuple comparison is used (no hashing), so equal
    ranks really mean indistinguishable neighborhoods.
    """
    adj = g.adjacency()
    ranks = dict(seed_ranks)
    nclasses = len(set(ranks.values()))
    while True:
        signature = {}
        for i in atoms:
            neigh = sorted(
                (_BOND_RANK[g.bonds[k].order], ranks[j])
                for j, k in adj[i] if j in ranks
            )
            signature[i] = (ranks[i], tuple(neigh))
        ordered = sorted(set(signature.values()))
        lookup = {sig: r for r, sig in enumerate(ordered)}
        new_ranks = {i: lookup[signature[i]] for i in atoms}
        new_n = len(ordered)
        if new_n == nclasses:
            return new_ranks
        ranks, nclasses = new_ranks, new_n


def _canonical_component(g, comp, budget=20000):
    """Lexicographically smallest serialization of one component.

    Refinement usually separates all atoms; remaining ties are broken by
    individualizing each member of the first tied class in turn and taking
    the minimum over the resulting trial serializations.
    """
    inv = _initial_invariants(g, comp)
    ordered = sorted(set(inv.values()))
    lookup = {v: r for r, v in enumerate(ordered)}
    base = _refine(g, comp, {i: lookup[inv[i]] for i in comp})

    best = None
    leaves = 0

    def serialize(ranks):
        root = min(comp, key=lambda i: ranks[i])

        def order_key(parent, pairs):
            return sorted(pairs, key=lambda wk: ranks[wk[0]])

        text, _ = _serialize_component(g, root, order_key, include_stereo=False)
        return text

    def descend(ranks):
        nonlocal best, leaves
        cells: dict[int, list[int]] = {}
        for i in comp:
            cells.setdefault(ranks[i], []).append(i)
        tied = sorted(r for r, members in cells.items() if len(members) > 1)
        if not tied:
            leaves += 1
            if leaves > budget:
                raise CanonicalizationOverflow(
                    f"more than {budget} trial serializations required")
            text = serialize(ranks)
            if best is None or text < best:
                best = text
            return
        members = cells[tied[0]]
        for a in members:
            seeded = {i: (ranks[i], 1 if i == a else 0) for i in comp}
            ordered = sorted(set(seeded.values()))
            lk = {v: r for r, v in enumerate(ordered)}
            descend(_refine(g, comp, {i: lk[seeded[i]] for i in comp}))

    descend(base)
    return best


def canonical_smiles(g):
    """Deterministic SMILES identical for all graphs isomorphic to ``g``.

    Chirality and bond stereo marks are ignored (never written); see the
    module docstring.  The empty graph canonicalizes to the empty string.
    """
    if not g.atoms:
        return ""
    parts = sorted(_canonical_component(g, comp) for comp in g.components())
    return ".".join(parts)


def canonical_hash(text):
    """128-bit identifier of a SMILES string's canonical form.

    Algorithm is pinned (``HASH_ALGORITHM_ID``): xxh128 of the UTF-8
    canonical SMILES.  Parse errors propagate.
    """
    canon = canonical_smiles(parse_smiles(text))
    return xxhash.xxh128(canon.encode("utf-8")).intdigest()


# ---------------------------------------------------------------------------
# Scaffolds and fingerprints
# ---------------------------------------------------------------------------

def scaffold(g):
    """Ring-and-linker framework: terminal non-ring atoms removed to fixpoint.

    Acyclic molecules yield the empty scaffold (a graph with no atoms).
    """
    keep = set(range(len(g.atoms)))
    degree = {i: g.degree(i) for i in keep}
    adj = g.adjacency()
    changed = True
    while changed:
        changed = False
        for i in sorted(keep):
            if degree[i] <= 1 and not g.ring_atom[i]:
                keep.discard(i)
                for j, _ in adj[i]:
                    if j in keep:
                        degree[j] -= 1
                changed = True
    index = {old: new for new, old in enumerate(sorted(keep))}
    atoms = [replace(g.atoms[i]) for i in sorted(keep)]
    bonds = [Bond(index[b.a], index[b.b], b.order, b.stereo_mark)
             for b in g.bonds if b.a in keep and b.b in keep]
    return MolGraph(atoms=atoms, bonds=bonds)


def scaffold_key(g):
    """Canonical SMILES of the scaffold; '' groups all acyclic molecules."""
    return canonical_smiles(scaffold(g))


def _stable64(*parts):
    return xxhash.xxh64(repr(parts).encode("utf-8")).intdigest()


def ecfp(g, radius=2, nbits=2048):
    """Extended-connectivity circular fingerprint as a 0/1 array of ``nbits``.

    Per-atom identifiers start from a hash of the local invariant and are
    rehashed ``radius`` times over sorted neighbor (bond, identifier) pairs;
    identifiers from every round fold into the bit vector by modulus.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if nbits <= 0 or nbits & (nbits - 1):
        raise ValueError("nbits must be a power of two")
    degree = [0] * len(g.atoms)
    for bond in g.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1
    ids = [
        _stable64("atom", a.element, degree[i], a.formal_charge, a.aromatic,
                  a.explicit_h if a.explicit_h is not None else -1,
                  g.ring_atom[i], a.isotope or 0)
        for i, a in enumerate(g.atoms)
    ]
    adj = g.adjacency()
    bits = np.zeros(nbits, dtype=np.uint8)
    for i in ids:
        bits[i % nbits] = 1
    for r in range(1, radius + 1):
        new_ids = []
        for i in range(len(g.atoms)):
            neigh = sorted((_BOND_RANK[g.bonds[k].order], ids[j]) for j, k in adj[i])
            new_ids.append(_stable64("iter", r, ids[i], tuple(neigh)))
        ids = new_ids
        for i in ids:
            bits[i % nbits] = 1
    return bits


# ---------------------------------------------------------------------------
# Scaffold split
# ---------------------------------------------------------------------------

@dataclass
class SplitResult:
    train: list[int]
    valid: list[int]
    test: list[int]
    skipped: list[int] = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.valid, self.test))


def scaffold_split(records, fractions=(0.8, 0.1, 0.1), seed=0):
    """Group records by canonical scaffold and fill train, then valid, then test.

    ``records`` is a sequence of (smiles, labels) pairs or bare SMILES
    strings.  Groups are assigned whole, largest first (ties shuffled by
    ``seed``), so no scaffold ever straddles two splits.  Unparseable rows
    are skipped with an :class:`UnparseableRecord` warning.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError("fractions must be three positive numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    groups: dict[str, list[int]] = {}
    skipped = []
    for row, record in enumerate(records):
        smiles = record if isinstance(record, str) else record[0]
        try:
            key = scaffold_key(parse_smiles(smiles))
        except SmilesError as exc:
            warnings.warn(f"row {row}: unparseable SMILES {smiles!r}: {exc}",
                          UnparseableRecord, stacklevel=2)
            skipped.append(row)
            continue
        groups.setdefault(key, []).append(row)

    n = sum(len(v) for v in groups.values())
    rng = random.Random(seed)
    ordered = list(groups.values())
    rng.shuffle(ordered)
    ordered.sort(key=len, reverse=True)  # stable: ties keep shuffled order

    train_target = fractions[0] * n
    valid_target = fractions[1] * n
    train, valid, test = [], [], []
    for group in ordered:
        if len(train) < train_target:
            train.extend(group)
        elif len(valid) < valid_target:
            valid.extend(group)
        else:
            test.extend(group)
    return SplitResult(sorted(train), sorted(valid), sorted(test), skipped)

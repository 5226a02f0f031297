"""Synthetic SMILES corpora for tests, demos, and desk-scale training runs.

Molecules are assembled as graphs (rings, chains, decorations) and then
serialized, so every emitted string is parseable by this toolkit.  The
generator aims for token diversity (many elements, charges, ring sizes)
rather than chemical plausibility.
"""

from __future__ import annotations

import random

from .molgraph import (AROMATIC, DOUBLE, SINGLE, TRIPLE, Atom, Bond, MolGraph,
                       write_smiles)

_HALOGENS = ["F", "Cl", "Br", "I"]
_CHAIN_ELEMENTS = ["C", "C", "C", "N", "O", "S"]
_AROMATIC_HETERO = ["N", "O", "S"]


def random_molecule(rng: random.Random, max_rings=2, max_chain=6,
                    decorations=3) -> MolGraph:
    """One random molecule graph: ring systems joined by chains, decorated."""
    atoms: list[Atom] = []
    bonds: list[Bond] = []

    def add_atom(atom):
        atoms.append(atom)
        return len(atoms) - 1

    def add_ring():
        aromatic = rng.random() < 0.6
        if aromatic:
            size = rng.choice([5, 6, 6])
        else:
            size = rng.choice([3, 4, 5, 6, 6, 7])
        first = len(atoms)
        for i in range(size):
            element = "C"
            explicit_h = None
            if rng.random() < 0.25:
                element = rng.choice(_AROMATIC_HETERO if aromatic else _CHAIN_ELEMENTS)
            if aromatic and element == "N" and rng.random() < 0.3:
                explicit_h = 1
            add_atom(Atom(element=element, aromatic=aromatic, explicit_h=explicit_h))
        for i in range(size):
            a, b = first + i, first + (i + 1) % size
            bonds.append(Bond(a, b, AROMATIC if aromatic else SINGLE))
        return list(range(first, first + size))

    def add_chain(attach_to):
        length = rng.randint(1, max_chain)
        prev = attach_to
        for _ in range(length):
            idx = add_atom(Atom(element=rng.choice(_CHAIN_ELEMENTS)))
            if prev is not None:
                order = SINGLE
                if prev != attach_to and not atoms[prev].aromatic and rng.random() < 0.15:
                    order = rng.choice([DOUBLE, TRIPLE])
                bonds.append(Bond(prev, idx, order))
            prev = idx
        return prev

    ring_atoms: list[int] = []
    for _ in range(rng.randint(0, max_rings)):
        ring_atoms.extend(add_ring())

    if not atoms:
        add_chain(None)
    elif rng.random() < 0.7:
        add_chain(rng.choice(ring_atoms))

    for _ in range(rng.randint(0, decorations)):
        host = rng.randrange(len(atoms))
        roll = rng.random()
        if roll < 0.4:
            idx = add_atom(Atom(element=rng.choice(_HALOGENS)))
            bonds.append(Bond(host, idx, SINGLE))
        elif roll < 0.7 and not atoms[host].aromatic:
            idx = add_atom(Atom(element="O"))
            bonds.append(Bond(host, idx, DOUBLE))
        elif roll < 0.85:
            idx = add_atom(Atom(element="N", formal_charge=1, explicit_h=3))
            bonds.append(Bond(host, idx, SINGLE))
        else:
            idx = add_atom(Atom(element="O", formal_charge=-1))
            bonds.append(Bond(host, idx, SINGLE))

    return MolGraph(atoms=atoms, bonds=bonds)


def random_corpus(n, seed=0, randomize_rendering=False, **molecule_kw) -> list[str]:
    """``n`` independent random molecules serialized to SMILES."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        g = random_molecule(rng, **molecule_kw)
        root = rng.randrange(g.num_atoms) if randomize_rendering else 0
        out.append(write_smiles(g, root=root,
                                rng=rng if randomize_rendering else None))
    return out


def pooled_corpus(n, pool_size=200, seed=0, **molecule_kw) -> list[str]:
    """``n`` draws with replacement from ``pool_size`` distinct molecules.

    Low-entropy corpus for desk-scale pretraining demos: repeated strings
    make masked-token recovery learnable by a small model while the diverse
    alphabet keeps the majority-token baseline low.
    """
    pool = random_corpus(pool_size, seed=seed, **molecule_kw)
    rng = random.Random(seed + 1)
    return [pool[rng.randrange(pool_size)] for _ in range(n)]

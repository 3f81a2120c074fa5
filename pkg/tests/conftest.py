from __future__ import annotations

import sys
from pathlib import Path

import pytest

from formmeaning.lexicon import ASJP_SYMBOLS, Alphabet, Doculect, Lexicon, WordEntry

sys.path.insert(0, str(Path(__file__).parent))

HEADER = "doculect_id\tiso_code\tfamily\tmacroarea\tlatitude\tlongitude\tstatus_flags\tconcept\tform\tloan\n"


def tsv(*rows: str) -> str:
    return HEADER + "".join(r + "\n" for r in rows)


@pytest.fixture
def asjp() -> Alphabet:
    return Alphabet(ASJP_SYMBOLS)


def make_lexicon(layout: dict[str, tuple[str, int]], n_concepts: int = 3, alphabet: Alphabet | None = None,
                 seed: int = 0) -> Lexicon:
    """Lexicon with ``layout[family] = (macroarea, n_doculects)`` and short random words."""
    import numpy as np

    alphabet = alphabet or Alphabet(ASJP_SYMBOLS)
    rng = np.random.default_rng(seed)
    docs = []
    for fam, (area, n) in layout.items():
        for j in range(n):
            entries = tuple(
                WordEntry(c, tuple(int(x) for x in rng.integers(0, len(alphabet.symbols), rng.integers(1, 5)))
                          + (alphabet.eos,))
                for c in range(n_concepts)
            )
            docs.append(Doculect(f"{fam}_{j}", fam, area, None, 0.0, 0.0, frozenset(), entries))
    return Lexicon(alphabet, tuple(f"c{i}" for i in range(n_concepts)), tuple(docs))

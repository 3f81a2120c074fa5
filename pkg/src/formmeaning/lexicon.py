"""Wordlist ingestion: parsing, filtering, macroarea reassignment and folds.

The on-disk format is a UTF-8 TSV with one row per (doculect, concept) word
and a sidecar alphabet file listing one phone symbol per line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from collections import Counter, defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import ConfigError, DataError, ParseError
from .rng import make_rng

log = logging.getLogger(__name__)

MACROAREAS = ("Africa", "Americas", "Eurasia", "Pacific")
STATUS_FLAGS = frozenset({"pidgin_creole", "constructed"})
TSV_COLUMNS = (
    "doculect_id",
    "iso_code",
    "family",
    "macroarea",
    "latitude",
    "longitude",
    "status_flags",
    "concept",
    "form",
    "loan",
)

# (train areas, validation area, test area), in reporting order.
MACROAREA_FOLDS = (
    (("Pacific", "Americas"), "Eurasia", "Africa"),
    (("Eurasia", "Africa"), "Pacific", "Americas"),
    (("Africa", "Pacific"), "Americas", "Eurasia"),
    (("Americas", "Eurasia"), "Africa", "Pacific"),
)

# The 41 ASJP base symbols.
ASJP_SYMBOLS = tuple("pbfvmw8tdszcnrlSZCjT5ykgxNqXh7L4G!ieE3auo")
MAX_SYMBOLS = len(ASJP_SYMBOLS)


@dataclass(frozen=True)
class Alphabet:
    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise DataError("alphabet symbols must be unique")
        if any(not s or s.isspace() for s in self.symbols):
            raise DataError("alphabet symbols must be non-empty")
        if len(self.symbols) > MAX_SYMBOLS:
            raise DataError(f"alphabet has {len(self.symbols)} symbols, at most {MAX_SYMBOLS} allowed")

    @property
    def eos(self) -> int:
        return len(self.symbols)

    @property
    def n_classes(self) -> int:
        return len(self.symbols) + 1

    def symbol(self, index: int) -> str:
        return "</s>" if index == self.eos else self.symbols[index]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.symbols).encode("utf-8")).hexdigest()[:16]

    def encode(self, form: str) -> tuple[int, ...]:
        """Tokenize ``form`` by greedy longest match and append eos.

        Raises ``KeyError`` carrying the offending text if a position matches
        no declared symbol.
        """
        lookup = {s: i for i, s in enumerate(self.symbols)}
        longest = max(len(s) for s in self.symbols)
        out = []
        pos = 0
        while pos < len(form):
            for width in range(min(longest, len(form) - pos), 0, -1):
                idx = lookup.get(form[pos : pos + width])
                if idx is not None:
                    out.append(idx)
                    pos += width
                    break
            else:
                raise KeyError(form[pos])
        out.append(self.eos)
        return tuple(out)

    def decode(self, phones: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in phones if i != self.eos)


@dataclass(frozen=True)
class WordEntry:
    concept_id: int
    phones: tuple[int, ...]
    loan: bool = False

    @property
    def n_phones(self) -> int:
        """Prediction steps for this word, eos included."""
        return len(self.phones)


@dataclass(frozen=True)
class Doculect:
    doculect_id: str
    family: str
    macroarea: str
    iso_code: str | None = None
    latitude: float = 0.0
    longitude: float = 0.0
    status_flags: frozenset[str] = frozenset()
    entries: tuple[WordEntry, ...] = ()

    @property
    def language(self) -> str:
        return self.iso_code or self.doculect_id


@dataclass(frozen=True)
class Lexicon:
    alphabet: Alphabet
    concepts: tuple[str, ...]
    doculects: tuple[Doculect, ...]

    def __post_init__(self):
        k = len(self.concepts)
        if len(set(self.concepts)) != k:
            raise DataError("concept names must be distinct")
        for d in self.doculects:
            for e in d.entries:
                if not 0 <= e.concept_id < k:
                    raise DataError(f"{d.doculect_id}: concept id {e.concept_id} out of range")

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    @property
    def n_words(self) -> int:
        return sum(len(d.entries) for d in self.doculects)

    def by_id(self) -> dict[str, Doculect]:
        return {d.doculect_id: d for d in self.doculects}

    def subset(self, doculect_ids: Iterable[str]) -> Lexicon:
        keep = set(doculect_ids)
        return replace(self, doculects=tuple(d for d in self.doculects if d.doculect_id in keep))

    def fingerprint(self) -> str:
        return hashlib.sha256(serialize(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class FilterPolicy:
    exclude_flags: frozenset[str] = frozenset({"pidgin_creole", "constructed"})
    drop_loans: bool = True


@dataclass(frozen=True)
class Fold:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    label: tuple[str, str, str] = ("", "", "")


@dataclass(frozen=True)
class FoldAssignment:
    scheme: str
    folds: tuple[Fold, ...] = field(default_factory=tuple)


def load_alphabet(text: str) -> Alphabet:
    symbols = tuple(line.strip() for line in text.splitlines() if line.strip())
    if not symbols:
        raise ParseError("alphabet file declares no symbols")
    return Alphabet(symbols)


def _parse_flags(raw: str, line: int) -> frozenset[str]:
    flags = frozenset(f.strip() for f in raw.split(",") if f.strip())
    unknown = flags - STATUS_FLAGS
    if unknown:
        raise ParseError(f"unknown status flag(s) {sorted(unknown)}", line)
    return flags


def parse_wordlists(raw: bytes | str, alphabet: Alphabet) -> Lexicon:
    """Parse the wordlist TSV into a :class:`Lexicon`.

    Rows whose form contains undeclared symbols are skipped with a warning.
    Only the first row for each (doculect, concept) pair is kept.
    """
    text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    reader = csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE)
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input", 1) from None
    if tuple(h.strip() for h in header) != TSV_COLUMNS:
        raise ParseError(f"malformed header, expected {'/'.join(TSV_COLUMNS)}", 1)

    concepts: dict[str, int] = {}
    meta: dict[str, tuple] = {}
    entries: dict[str, list[WordEntry]] = {}
    seen: set[tuple[str, int]] = set()
    rejected = duplicates = 0

    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(TSV_COLUMNS):
            raise ParseError(f"expected {len(TSV_COLUMNS)} fields, got {len(row)}", line)
        doc, iso, family, area, lat, lon, flags, concept, form, loan = (c.strip() for c in row)
        if not doc or not family or not concept:
            raise ParseError("doculect_id, family and concept are required", line)
        if area not in MACROAREAS:
            raise ParseError(f"unknown macroarea {area!r}", line)
        try:
            latitude, longitude = float(lat or 0.0), float(lon or 0.0)
        except ValueError:
            raise ParseError(f"bad coordinates {lat!r}, {lon!r}", line) from None
        if loan not in ("0", "1"):
            raise ParseError(f"loan must be 0 or 1, got {loan!r}", line)
        row_meta = (iso or None, family, area, latitude, longitude, _parse_flags(flags, line))
        if doc in meta and meta[doc] != row_meta:
            raise ParseError(f"metadata for doculect {doc!r} differs from its first row", line)
        meta.setdefault(doc, row_meta)
        entries.setdefault(doc, [])

        if not form:
            log.warning("line %d: empty form for %s/%s, row rejected", line, doc, concept)
            rejected += 1
            continue
        try:
            phones = alphabet.encode(form)
        except KeyError as exc:
            log.warning("line %d: undeclared symbol %r in %r, row rejected", line, exc.args[0], form)
            rejected += 1
            continue
        cid = concepts.setdefault(concept, len(concepts))
        if (doc, cid) in seen:
            duplicates += 1
            continue
        seen.add((doc, cid))
        entries[doc].append(WordEntry(cid, phones, loan == "1"))

    if not concepts:
        raise ParseError("no concepts found (K == 0)")
    if rejected or duplicates:
        log.info("parse: %d rows rejected, %d duplicate rows dropped", rejected, duplicates)

    doculects = []
    for doc, (iso, family, area, lat, lon, flags) in meta.items():
        doculects.append(Doculect(doc, family, area, iso, lat, lon, flags, tuple(entries[doc])))
    return Lexicon(alphabet, tuple(concepts), tuple(doculects))


def _fmt_float(x: float) -> str:
    return repr(float(x))


def serialize(lex: Lexicon) -> str:
    """Render ``lex`` back into the TSV format (header included)."""
    out = io.StringIO()
    out.write("\t".join(TSV_COLUMNS) + "\n")
    for d in lex.doculects:
        flags = ",".join(sorted(d.status_flags))
        for e in d.entries:
            fields = (
                d.doculect_id,
                d.iso_code or "",
                d.family,
                d.macroarea,
                _fmt_float(d.latitude),
                _fmt_float(d.longitude),
                flags,
                lex.concepts[e.concept_id],
                lex.alphabet.decode(e.phones),
                "1" if e.loan else "0",
            )
            out.write("\t".join(fields) + "\n")
    return out.getvalue()


def filter_lexicon(lex: Lexicon, policy: FilterPolicy) -> Lexicon:
    """Drop excluded doculects and, optionally, loan entries.

    A doculect left with no entries after loan removal is dropped too.
    """
    kept = []
    n_flagged = n_loans = n_emptied = 0
    for d in lex.doculects:
        if d.status_flags & policy.exclude_flags:
            n_flagged += 1
            continue
        if policy.drop_loans:
            entries = tuple(e for e in d.entries if not e.loan)
            n_loans += len(d.entries) - len(entries)
            if not entries:
                n_emptied += 1
                continue
            if len(entries) != len(d.entries):
                d = replace(d, entries=entries)
        kept.append(d)
    summary = (
        f"{n_flagged} doculects excluded by flags {sorted(policy.exclude_flags)}, "
        f"{n_loans} loan entries dropped, {n_emptied} doculects emptied"
    )
    log.info("filter: %s", summary)
    if not kept:
        raise DataError(f"filtering removed every doculect ({summary})")
    return replace(lex, doculects=tuple(kept))


def reassign_families_to_macroareas(lex: Lexicon) -> Lexicon:
    """Move every family into the macroarea holding most of its doculects.

    Ties go to the alphabetically first macroarea name.
    """
    counts: dict[str, Counter] = defaultdict(Counter)
    for d in lex.doculects:
        counts[d.family][d.macroarea] += 1
    home = {
        fam: min(c, key=lambda area: (-c[area], MACROAREAS.index(area)))
        for fam, c in counts.items()
    }
    moved = sum(1 for d in lex.doculects if d.macroarea != home[d.family])
    if moved:
        log.info("reassigned %d doculects to their family's majority macroarea", moved)
    return replace(
        lex,
        doculects=tuple(
            d if d.macroarea == home[d.family] else replace(d, macroarea=home[d.family])
            for d in lex.doculects
        ),
    )


def _macroarea_folds(lex: Lexicon) -> FoldAssignment:
    areas: dict[str, set[str]] = defaultdict(set)
    family_areas: dict[str, set[str]] = defaultdict(set)
    for d in lex.doculects:
        areas[d.macroarea].add(d.doculect_id)
        family_areas[d.family].add(d.macroarea)
    split = sorted(f for f, a in family_areas.items() if len(a) > 1)
    if split:
        raise DataError(
            f"families span several macroareas ({', '.join(split[:5])}); "
            "run reassign_families_to_macroareas first"
        )
    empty = [a for a in MACROAREAS if not areas.get(a)]
    if empty:
        raise DataError(f"macroarea(s) with zero doculects: {', '.join(empty)}")
    folds = []
    for train_areas, val, test in MACROAREA_FOLDS:
        folds.append(
            Fold(
                train=frozenset(areas[train_areas[0]] | areas[train_areas[1]]),
                validation=frozenset(areas[val]),
                test=frozenset(areas[test]),
                label=(", ".join(train_areas), val, test),
            )
        )
    return FoldAssignment("macroarea", tuple(folds))


def _family_folds(lex: Lexicon, seed: int) -> FoldAssignment:
    members: dict[str, set[str]] = defaultdict(set)
    for d in lex.doculects:
        members[d.family].add(d.doculect_id)
    families = sorted(members)
    if len(families) < 4:
        raise DataError(f"family folds need at least 4 families, found {len(families)}")
    order = make_rng("family-folds", seed).permutation(len(families))
    shuffled = [families[i] for i in order]
    # Largest first, stable on the shuffled order, each to the lightest group.
    shuffled.sort(key=lambda f: -len(members[f]))
    groups: list[set[str]] = [set() for _ in range(4)]
    sizes = [0] * 4
    for fam in shuffled:
        g = min(range(4), key=lambda i: (sizes[i], i))
        groups[g] |= members[fam]
        sizes[g] += len(members[fam])
    folds = []
    for i in range(4):
        val, test = (i + 1) % 4, i
        train = set().union(*(groups[j] for j in range(4) if j not in (val, test)))
        folds.append(
            Fold(
                train=frozenset(train),
                validation=frozenset(groups[val]),
                test=frozenset(groups[test]),
                label=(
                    ", ".join(f"G{j + 1}" for j in range(4) if j not in (val, test)),
                    f"G{val + 1}",
                    f"G{test + 1}",
                ),
            )
        )
    return FoldAssignment("family", tuple(folds))


def make_folds(lex: Lexicon, scheme: str = "macroarea", seed: int = 0) -> FoldAssignment:
    """Build the four train/validation/test folds.

    ``scheme="macroarea"`` reproduces the fixed macroarea rotation and ignores
    ``seed``; ``scheme="family"`` shuffles whole families into four groups of
    roughly equal doculect count.
    """
    if scheme == "macroarea":
        return _macroarea_folds(lex)
    if scheme == "family":
        return _family_folds(lex, seed)
    raise ConfigError(f"unknown fold scheme {scheme!r}")


def family_weights(doculects: Iterable[Doculect]) -> dict[str, Fraction]:
    """Inverse family size, counted in doculects within the given set.

    Weights are exact fractions so every family's total is exactly one;
    convert with ``float`` where arrays are built.
    """
    doculects = list(doculects)
    sizes = Counter(d.family for d in doculects)
    return {d.doculect_id: Fraction(1, sizes[d.family]) for d in doculects}


def family_of(lex: Lexicon) -> Mapping[str, str]:
    return {d.doculect_id: d.family for d in lex.doculects}

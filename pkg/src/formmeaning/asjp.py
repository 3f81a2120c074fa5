"""Converter from an ASJP CLDF export to the wordlist TSV.

Only the pieces the pipeline needs are read: ``languages.csv``,
``parameters.csv`` and ``forms.csv``. Column names default to those of the
CLDF release and can be overridden for other dumps.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError
from .lexicon import ASJP_SYMBOLS, TSV_COLUMNS

log = logging.getLogger(__name__)

# Glottolog's six macroareas folded into the four used for folds.
MACROAREA_ALIASES = {
    "africa": "Africa",
    "eurasia": "Eurasia",
    "papunesia": "Pacific",
    "australia": "Pacific",
    "pacific": "Pacific",
    "north america": "Americas",
    "south america": "Americas",
    "americas": "Americas",
}

MODIFIERS = frozenset('*"~$')
PIDGIN_MARKERS = ("creole", "pidgin", "mixed language")
CONSTRUCTED_MARKERS = ("artificial", "constructed", "fake", "speech register")


@dataclass(frozen=True)
class CldfColumns:
    language_id: str = "ID"
    iso: str = "ISO639P3code"
    macroarea: str = "Macroarea"
    latitude: str = "Latitude"
    longitude: str = "Longitude"
    family: str = "classification_glottolog"
    status: str = "classification_wals"
    concept_id: str = "ID"
    concept_name: str = "Name"
    form_language: str = "Language_ID"
    form_concept: str = "Parameter_ID"
    form: str = "Form"
    loan: str = "Loan"


def clean_form(raw: str) -> str:
    """Strip ASJP modifier marks, keep the first synonym, drop spaces."""
    first = raw.split(",")[0].strip()
    return "".join(ch for ch in first if ch not in MODIFIERS and not ch.isspace())


def _family(raw: str) -> str:
    for sep in (",", "/", ".", ";"):
        raw = raw.split(sep)[0]
    return raw.strip()


def _flags(*texts: str) -> str:
    joined = " ".join(texts).lower()
    flags = []
    if any(m in joined for m in CONSTRUCTED_MARKERS):
        flags.append("constructed")
    if any(m in joined for m in PIDGIN_MARKERS):
        flags.append("pidgin_creole")
    return ",".join(flags)


def _read(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def convert_cldf(directory, columns: CldfColumns | None = None) -> str:
    """Return wordlist TSV text built from the CLDF tables in ``directory``.

    Languages with an unmapped macroarea or no family are skipped with a
    warning, as are forms that are empty after cleaning.
    """
    cols = columns or CldfColumns()
    directory = Path(directory)
    try:
        languages = _read(directory / "languages.csv")
        parameters = _read(directory / "parameters.csv")
        forms = _read(directory / "forms.csv")
    except (OSError, KeyError) as exc:
        raise ParseError(f"cannot read CLDF tables: {exc}") from exc

    concept = {p[cols.concept_id]: p[cols.concept_name] for p in parameters}
    meta = {}
    for lang in languages:
        area = MACROAREA_ALIASES.get(lang.get(cols.macroarea, "").strip().lower())
        family = _family(lang.get(cols.family, ""))
        if area is None or not family:
            log.warning("language %s skipped: macroarea or family missing", lang[cols.language_id])
            continue
        meta[lang[cols.language_id]] = (
            lang.get(cols.iso, "").strip(),
            family,
            area,
            lang.get(cols.latitude, "").strip() or "0.0",
            lang.get(cols.longitude, "").strip() or "0.0",
            _flags(lang.get(cols.status, ""), lang.get(cols.family, "")),
        )

    out = io.StringIO()
    out.write("\t".join(TSV_COLUMNS) + "\n")
    for f in forms:
        lang_id = f[cols.form_language]
        if lang_id not in meta:
            continue
        form = clean_form(f.get(cols.form, ""))
        if not form:
            continue
        iso, family, area, lat, lon, flags = meta[lang_id]
        loan = "1" if f.get(cols.loan, "").strip().lower() in ("true", "1", "yes") else "0"
        out.write(
            "\t".join((lang_id, iso, family, area, lat, lon, flags, concept[f[cols.form_concept]], form, loan))
            + "\n"
        )
    return out.getvalue()


def asjp_alphabet_text() -> str:
    return "\n".join(ASJP_SYMBOLS) + "\n"

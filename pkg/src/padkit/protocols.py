"""Dataset manifests and the four benchmark split engines.

A manifest row describes one single-modality video. The 2D corpus holds,
per ethnicity and subject, one bona fide clip plus three attack clips
(indoor print, outdoor print, replay), each captured in three modalities,
so a full 500-subject corpus carries 3 * 500 * 4 * 3 = 18000 clips. Mask
and silica-gel entries form a separate 3D subset without ethnicity labels.

Subjects are numbered per ethnicity, and each ethnicity is divided into
subject-disjoint train/valid/test ranges in 40/20/40 proportion (1-200,
201-300, 301-500 at full scale). The four protocol families hold one
factor out:

    1  cross-ethnicity         train one ethnicity, test the other two
    2  cross-attack            train one attack family, test the other
    3  cross-modality          train one modality, test the other two
    4  cross-ethnicity+attack  train one ethnicity on replay clips only,
                               test print clips of the other ethnicities

The 3D subset joins every test set by default; its composition is
reported, never asserted, because it is configuration-dependent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

__all__ = [
    "ManifestError",
    "ManifestEntry",
    "SplitFilters",
    "ProtocolSplit",
    "SplitReport",
    "SUB_PROTOCOLS",
    "parse_manifest",
    "write_manifest",
    "build_split",
    "validate_split",
]

ETHNICITIES = ("A", "C", "E")            # Africa, Central Asia, East Asia
MODALITIES = ("R", "D", "I")             # color, depth, infrared
ATTACK_TYPES = ("real", "print_indoor", "print_outdoor", "replay",
                "mask3d", "silicagel")
ATTACKS_2D = ("print_indoor", "print_outdoor", "replay")
ATTACKS_3D = ("mask3d", "silicagel")
PAI_FAMILY = {"print_indoor": "print", "print_outdoor": "print",
              "replay": "replay", "mask3d": "mask3d", "silicagel": "silicagel"}

SUB_PROTOCOLS = ("1_1", "1_2", "1_3", "2_1", "2_2",
                 "3_1", "3_2", "3_3", "4_1", "4_2", "4_3")

MANIFEST_HEADER = ["subject_id", "ethnicity", "modality", "attack_type", "path"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: int
    ethnicity: str        # empty for the 3D subset
    modality: str
    attack_type: str
    path: str

    @property
    def is_bonafide(self) -> bool:
        return self.attack_type == "real"

    @property
    def is_3d(self) -> bool:
        return self.attack_type in ATTACKS_3D

    @property
    def pai(self) -> str:
        return "-" if self.is_bonafide else PAI_FAMILY[self.attack_type]

    @property
    def subject_key(self) -> tuple[str, int]:
        """Disjointness identity: 3D subjects live in their own spaces."""
        space = self.ethnicity if not self.is_3d else f"3d:{self.attack_type}"
        return (space, self.subject_id)


def _validate_entry(entry: ManifestEntry, where: str) -> None:
    if entry.subject_id < 1:
        raise ManifestError(f"{where}: subject ids are positive, got {entry.subject_id}")
    if entry.attack_type not in ATTACK_TYPES:
        raise ManifestError(f"{where}: unknown attack_type '{entry.attack_type}'")
    if entry.modality not in MODALITIES:
        raise ManifestError(f"{where}: unknown modality '{entry.modality}'")
    if entry.is_3d:
        if entry.ethnicity:
            raise ManifestError(f"{where}: 3D entries carry no ethnicity")
    elif entry.ethnicity not in ETHNICITIES:
        raise ManifestError(f"{where}: unknown ethnicity '{entry.ethnicity}'")


def parse_manifest(path) -> list[ManifestEntry]:
    """Read and validate a manifest CSV; duplicate paths are rejected."""
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest file") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ManifestError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                subject = int(row[0])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad subject id '{row[0]}'") from None
            entry = ManifestEntry(subject, row[1], row[2], row[3], row[4])
            _validate_entry(entry, f"{path}:{lineno}")
            if entry.path in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate video path '{entry.path}'")
            seen.add(entry.path)
            entries.append(entry)
    return entries


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.subject_id, e.ethnicity, e.modality, e.attack_type, e.path])


# -- split construction ------------------------------------------------------


@dataclass(frozen=True)
class SplitFilters:
    train_ethnicities: tuple[str, ...]
    test_ethnicities: tuple[str, ...]
    train_modalities: tuple[str, ...]
    test_modalities: tuple[str, ...]
    train_attacks: tuple[str, ...]
    test_attacks: tuple[str, ...]
    train_range: tuple[int, int]        # inclusive subject id bounds
    valid_range: tuple[int, int]
    test_range: tuple[int, int]


@dataclass
class ProtocolSplit:
    protocol: int
    sub_id: str
    train: list[ManifestEntry]
    valid: list[ManifestEntry]
    test: list[ManifestEntry]
    filters: SplitFilters
    include_3d: bool


@dataclass
class SplitReport:
    violations: list[str] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)
    expected: dict[str, int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def subject_ranges(n_subjects: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """40/20/40 subject-disjoint ranges; 500 subjects give 1-200/201-300/301-500."""
    a = (2 * n_subjects) // 5
    b = (3 * n_subjects) // 5
    return (1, a), (a + 1, b), (b + 1, n_subjects)


def _others(pool: Sequence[str], chosen: str) -> tuple[str, ...]:
    return tuple(x for x in pool if x != chosen)


def _filters_for(sub_id: str, n_subjects: int) -> tuple[int, SplitFilters]:
    if sub_id not in SUB_PROTOCOLS:
        raise ValueError(f"unknown sub-protocol id '{sub_id}'")
    protocol, variant = (int(p) for p in sub_id.split("_"))
    idx = variant - 1
    tr, va, te = subject_ranges(n_subjects)
    all_eth, all_mod = ETHNICITIES, MODALITIES
    both_attacks = ("print_indoor", "print_outdoor", "replay")

    if protocol == 1:
        eth = ETHNICITIES[idx]
        f = SplitFilters((eth,), _others(all_eth, eth), all_mod, all_mod,
                         both_attacks, both_attacks, tr, va, te)
    elif protocol == 2:
        train_att = ("print_indoor", "print_outdoor") if variant == 1 else ("replay",)
        test_att = ("replay",) if variant == 1 else ("print_indoor", "print_outdoor")
        f = SplitFilters(all_eth, all_eth, all_mod, all_mod,
                         train_att, test_att, tr, va, te)
    elif protocol == 3:
        mod = MODALITIES[idx]
        f = SplitFilters(all_eth, all_eth, (mod,), _others(all_mod, mod),
                         both_attacks, both_attacks, tr, va, te)
    else:
        # hardest family: unseen ethnicities and an unseen attack family at
        # the same time (replay for fitting, print for testing)
        eth = ETHNICITIES[idx]
        f = SplitFilters((eth,), _others(all_eth, eth), all_mod, all_mod,
                         ("replay",), ("print_indoor", "print_outdoor"), tr, va, te)
    return protocol, f


def _in_range(subject: int, rng: tuple[int, int]) -> bool:
    return rng[0] <= subject <= rng[1]


def _select(entries: Iterable[ManifestEntry], eths, mods, attacks, rng) -> list[ManifestEntry]:
    out = []
    for e in entries:
        if e.is_3d:
            continue
        if e.ethnicity in eths and e.modality in mods and _in_range(e.subject_id, rng):
            if e.is_bonafide or e.attack_type in attacks:
                out.append(e)
    return out


def build_split(manifest: Sequence[ManifestEntry], sub_id: str,
                include_3d: bool = True) -> ProtocolSplit:
    """Materialize one sub-protocol from a manifest.

    The 2D subject count per ethnicity is inferred from the manifest, so
    reduced synthetic corpora split proportionally. 3D entries (filtered to
    the test modalities) are appended to the test set when ``include_3d``.
    """
    two_d = [e for e in manifest if not e.is_3d]
    if not two_d:
        raise ValueError("manifest has no 2D entries")
    n_subjects = max(e.subject_id for e in two_d)
    protocol, f = _filters_for(sub_id, n_subjects)

    train = _select(manifest, f.train_ethnicities, f.train_modalities,
                    f.train_attacks, f.train_range)
    valid = _select(manifest, f.train_ethnicities, f.train_modalities,
                    f.train_attacks, f.valid_range)
    test = _select(manifest, f.test_ethnicities, f.test_modalities,
                   f.test_attacks, f.test_range)
    if include_3d:
        test += [e for e in manifest if e.is_3d and e.modality in f.test_modalities]

    for name, subset in (("train", train), ("valid", valid), ("test", test)):
        if not subset:
            raise ValueError(f"sub-protocol {sub_id}: empty {name} subset")
    return ProtocolSplit(protocol, sub_id, train, valid, test, f, include_3d)


def _expected_counts(f: SplitFilters) -> dict[str, int]:
    per_subject_fakes = len(f.train_attacks)
    n_train = f.train_range[1] - f.train_range[0] + 1
    n_valid = f.valid_range[1] - f.valid_range[0] + 1
    n_test = f.test_range[1] - f.test_range[0] + 1
    eth_tr, mod_tr = len(f.train_ethnicities), len(f.train_modalities)
    eth_te, mod_te = len(f.test_ethnicities), len(f.test_modalities)
    test_fakes = len(f.test_attacks)
    return {
        "train_real": n_train * eth_tr * mod_tr,
        "train_fake": n_train * eth_tr * mod_tr * per_subject_fakes,
        "valid_real": n_valid * eth_tr * mod_tr,
        "valid_fake": n_valid * eth_tr * mod_tr * per_subject_fakes,
        "test_real_2d": n_test * eth_te * mod_te,
        "test_fake_2d": n_test * eth_te * mod_te * test_fakes,
    }


def validate_split(split: ProtocolSplit) -> SplitReport:
    """Check subject disjointness, filter conformity and 2D counts.

    2D counts are recomputed from first principles (subjects x clips x
    modalities); the 3D test contribution is reported without assertion.
    """
    report = SplitReport()
    f = split.filters

    subj = {name: {e.subject_key for e in subset}
            for name, subset in (("train", split.train), ("valid", split.valid),
                                 ("test", split.test))}
    for a, b in (("train", "valid"), ("train", "test"), ("valid", "test")):
        common = subj[a] & subj[b]
        if common:
            report.violations.append(
                f"subjects shared between {a} and {b}: {sorted(common)[:5]}")

    checks = (
        ("train", split.train, f.train_ethnicities, f.train_modalities,
         f.train_attacks, f.train_range),
        ("valid", split.valid, f.train_ethnicities, f.train_modalities,
         f.train_attacks, f.valid_range),
        ("test", split.test, f.test_ethnicities, f.test_modalities,
         f.test_attacks, f.test_range),
    )
    for name, subset, eths, mods, attacks, rng in checks:
        for e in subset:
            if e.is_3d:
                if name != "test":
                    report.violations.append(f"{name}: 3D entry {e.path}")
                continue
            if e.ethnicity not in eths:
                report.violations.append(f"{name}: ethnicity {e.ethnicity} ({e.path})")
            if e.modality not in mods:
                report.violations.append(f"{name}: modality {e.modality} ({e.path})")
            if not e.is_bonafide and e.attack_type not in attacks:
                report.violations.append(f"{name}: attack {e.attack_type} ({e.path})")
            if not _in_range(e.subject_id, rng):
                report.violations.append(
                    f"{name}: subject {e.subject_id} outside {rng} ({e.path})")

    report.expected = _expected_counts(f)
    report.counts = {
        "train_real": sum(e.is_bonafide for e in split.train),
        "train_fake": sum(not e.is_bonafide for e in split.train),
        "valid_real": sum(e.is_bonafide for e in split.valid),
        "valid_fake": sum(not e.is_bonafide for e in split.valid),
        "test_real_2d": sum(e.is_bonafide and not e.is_3d for e in split.test),
        "test_fake_2d": sum(not e.is_bonafide and not e.is_3d for e in split.test),
        "test_3d": sum(e.is_3d for e in split.test),
    }
    for key, want in report.expected.items():
        got = report.counts[key]
        if got != want:
            report.violations.append(f"count {key}: expected {want}, got {got}")
    return report

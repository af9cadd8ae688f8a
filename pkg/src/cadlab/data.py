"""Counterfactual-pair data model, JSONL I/O, featurization, environment
partitioning, and the synthetic pair generator.

The generator realizes a token-level feature model with four disjoint
vocabulary groups: edited-causal tokens (replaced by the counterfactual edit),
non-edited causal tokens, label-correlated tokens whose alignment strength is
controlled per split, and label-free noise tokens.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import numpy as np

ENV_ORIGINAL = "e_ori"
ENV_COUNTERFACTUAL = "e_cad"

VARIANT_ORIGINAL = "original"
VARIANT_COUNTERFACTUAL = "counterfactual"

GROUP_NAMES = ("edited_causal", "nonedited_causal", "correlated", "noise")


class DataError(ValueError):
    """Base class for data validation failures."""


class ParseError(DataError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


class PairingError(DataError):
    def __init__(self, pair_id, message):
        super().__init__(f"pair {pair_id!r}: {message}")
        self.pair_id = pair_id


class EmptyEnvironmentError(DataError):
    pass


@dataclass(frozen=True)
class Example:
    id: str
    tokens: tuple[str, ...]
    label: int
    pair_id: str
    variant: str           # "original" | "counterfactual"
    groups: dict | None = None

    @property
    def env(self) -> str:
        return ENV_ORIGINAL if self.variant == VARIANT_ORIGINAL else ENV_COUNTERFACTUAL


@dataclass(frozen=True)
class PairedExample:
    """A training unit: an original and (for augmented data) its counterfactual."""
    original: Example
    counterfactual: Example | None = None

    def members(self) -> tuple[Example, ...]:
        if self.counterfactual is None:
            return (self.original,)
        return (self.original, self.counterfactual)


@dataclass(frozen=True)
class FeatureGroups:
    """Global token-type partition of the generator vocabulary."""
    edited_causal: frozenset[str]
    nonedited_causal: frozenset[str]
    correlated: frozenset[str]
    noise: frozenset[str]

    def __post_init__(self):
        sets = [self.edited_causal, self.nonedited_causal, self.correlated, self.noise]
        total = sum(len(s) for s in sets)
        union = frozenset().union(*sets)
        if len(union) != total:
            raise DataError("feature groups must be pairwise disjoint")

    def by_name(self, name: str) -> frozenset[str]:
        if name not in GROUP_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {name: sorted(self.by_name(name)) for name in GROUP_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureGroups":
        return cls(**{name: frozenset(d[name]) for name in GROUP_NAMES})


# ---------------------------------------------------------------------------
# JSONL I/O

_REQUIRED_FIELDS = ("id", "text", "label", "pair_id", "variant")


def load_jsonl(path, require_pairs: bool = True) -> list[Example]:
    """Load and validate examples from a JSONL file.

    With require_pairs=True every pair_id must resolve to exactly one
    original/counterfactual pair with flipped labels. With require_pairs=False
    standalone originals are accepted (evaluation splits), but a counterfactual
    without its original is still an error.
    """
    examples: list[Example] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_no, f"invalid JSON: {e.msg}") from e
            for f in _REQUIRED_FIELDS:
                if f not in obj:
                    raise ParseError(path, line_no, f"missing field {f!r}")
            if obj["variant"] not in (VARIANT_ORIGINAL, VARIANT_COUNTERFACTUAL):
                raise ParseError(path, line_no, f"bad variant {obj['variant']!r}")
            if not isinstance(obj["label"], int) or obj["label"] < 0:
                raise ParseError(path, line_no, f"label must be a non-negative int, got {obj['label']!r}")
            examples.append(Example(
                id=str(obj["id"]),
                tokens=tuple(str(obj["text"]).split()),
                label=obj["label"],
                pair_id=str(obj["pair_id"]),
                variant=obj["variant"],
                groups=obj.get("groups"),
            ))
    validate_pairing(examples, require_pairs=require_pairs)
    return examples


def validate_pairing(examples: list[Example], require_pairs: bool = True) -> None:
    by_pair: dict[str, list[Example]] = {}
    for ex in examples:
        by_pair.setdefault(ex.pair_id, []).append(ex)
    for pair_id, members in by_pair.items():
        if len(members) == 1:
            if members[0].variant == VARIANT_COUNTERFACTUAL:
                raise PairingError(pair_id, "counterfactual without its original")
            if require_pairs:
                raise PairingError(pair_id, "orphan pair_id (missing counterfactual)")
        elif len(members) == 2:
            variants = {m.variant for m in members}
            if variants != {VARIANT_ORIGINAL, VARIANT_COUNTERFACTUAL}:
                raise PairingError(pair_id, f"expected one original and one counterfactual, got {sorted(variants)}")
            if members[0].label == members[1].label:
                raise PairingError(pair_id, f"paired labels must differ, both are {members[0].label}")
        else:
            raise PairingError(pair_id, f"{len(members)} examples share this pair_id")


def dump_jsonl(examples: list[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {
                "id": ex.id,
                "text": " ".join(ex.tokens),
                "label": ex.label,
                "pair_id": ex.pair_id,
                "variant": ex.variant,
            }
            if ex.groups is not None:
                obj["groups"] = ex.groups
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def pair_examples(examples: list[Example]) -> list[PairedExample]:
    """Group validated examples into training units, preserving file order."""
    by_pair: dict[str, dict[str, Example]] = {}
    order: list[str] = []
    for ex in examples:
        if ex.pair_id not in by_pair:
            by_pair[ex.pair_id] = {}
            order.append(ex.pair_id)
        by_pair[ex.pair_id][ex.variant] = ex
    pairs = []
    for pid in order:
        members = by_pair[pid]
        pairs.append(PairedExample(
            original=members[VARIANT_ORIGINAL],
            counterfactual=members.get(VARIANT_COUNTERFACTUAL),
        ))
    return pairs


# ---------------------------------------------------------------------------
# featurization

class Vocab:
    """Token index built from the training split only; one OOV bucket at the end."""

    def __init__(self, tokens):
        self.tokens = tuple(sorted(set(tokens)))
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.oov_index = len(self.tokens)
        self.size = len(self.tokens) + 1

    @classmethod
    def from_examples(cls, examples) -> "Vocab":
        toks = []
        for ex in examples:
            toks.extend(ex.tokens)
        return cls(toks)


def featurize(tokens, vocab: Vocab) -> np.ndarray:
    """L1-normalized token counts over the vocabulary, unknowns to the OOV bucket."""
    x = np.zeros(vocab.size, dtype=np.float64)
    for t in tokens:
        x[vocab.index.get(t, vocab.oov_index)] += 1.0
    total = x.sum()
    if total > 0.0:
        x /= total
    return x


def featurize_sparse(tokens, vocab: Vocab) -> list[tuple[int, float]]:
    """Sparse (index, weight) view of featurize(), for the graph-building encoder."""
    counts: dict[int, float] = {}
    for t in tokens:
        i = vocab.index.get(t, vocab.oov_index)
        counts[i] = counts.get(i, 0.0) + 1.0
    total = sum(counts.values())
    if total <= 0.0:
        return []
    return [(i, c / total) for i, c in sorted(counts.items())]


def featurize_matrix(examples, vocab: Vocab, mask_tokens: frozenset | set | None = None) -> np.ndarray:
    """Dense feature matrix for a list of examples; mask_tokens are removed
    before featurization (the inputs are never mutated)."""
    rows = np.zeros((len(examples), vocab.size), dtype=np.float64)
    for i, ex in enumerate(examples):
        toks = ex.tokens if mask_tokens is None else tuple(t for t in ex.tokens if t not in mask_tokens)
        rows[i] = featurize(toks, vocab)
    return rows


# ---------------------------------------------------------------------------
# environment partitioning

def partition_environments(examples, alpha: float, mode: str = "disjoint") -> dict[str, list[Example]]:
    """Split examples into the training environments used by the invariance penalty.

    mode="disjoint": e_ori holds the originals, e_cad the counterfactuals.
    mode="overlap":  e_ori holds the originals, e_cad the full augmented set
                     (originals plus counterfactuals).
    With alpha == 0 no penalty is computed, so a single non-empty environment
    is accepted; with alpha > 0 both environments must be non-empty.
    """
    if mode not in ("disjoint", "overlap"):
        raise ValueError(f"unknown environment mode {mode!r}")
    originals = [ex for ex in examples if ex.variant == VARIANT_ORIGINAL]
    counterfactuals = [ex for ex in examples if ex.variant == VARIANT_COUNTERFACTUAL]
    if mode == "disjoint":
        envs = {ENV_ORIGINAL: originals, ENV_COUNTERFACTUAL: counterfactuals}
    else:
        envs = {ENV_ORIGINAL: originals, ENV_COUNTERFACTUAL: list(examples)}
    if alpha > 0.0:
        for name, members in envs.items():
            if not members:
                raise EmptyEnvironmentError(
                    f"environment {name!r} is empty but the invariance weight is {alpha}")
    return {name: members for name, members in envs.items() if members}


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class GeneratorConfig:
    n_pairs: int = 2000
    n_classes: int = 2
    tokens_per_group: dict = field(default_factory=lambda: {
        "edited": 4, "nonedited": 4, "correlated": 4, "noise": 8})
    rho_train: float = 0.9
    rho_ood: float | None = None      # defaults to 1 - rho_train
    edit_scope: float = 0.5           # fraction of causal slots that are editable
    sentence_length: int = 10
    causal_per_sentence: int = 4
    correlated_per_sentence: int = 1
    n_ood: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise DataError("n_pairs must be >= 1")
        if self.n_classes < 2:
            raise DataError("n_classes must be >= 2")
        if not 0.0 <= self.rho_train <= 1.0:
            raise DataError("rho_train must be in [0, 1]")
        if self.rho_ood is None:
            self.rho_ood = 1.0 - self.rho_train
        if not 0.0 <= self.rho_ood <= 1.0:
            raise DataError("rho_ood must be in [0, 1]")
        if not 0.0 < self.edit_scope < 1.0:
            raise DataError("edit_scope must be in (0, 1)")
        for key in ("edited", "nonedited", "correlated", "noise"):
            if self.tokens_per_group.get(key, 0) < 1:
                raise DataError(f"tokens_per_group[{key!r}] must be >= 1")
        if self.causal_per_sentence < 2:
            raise DataError("causal_per_sentence must be >= 2 (edited and non-edited slots)")
        min_len = self.causal_per_sentence + self.correlated_per_sentence
        if self.sentence_length < min_len + 1:
            raise DataError(f"sentence_length must be >= {min_len + 1} to leave room for noise")

    @property
    def edited_per_sentence(self) -> int:
        k = round(self.edit_scope * self.causal_per_sentence)
        return min(max(k, 1), self.causal_per_sentence - 1)

    def to_dict(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "n_classes": self.n_classes,
            "tokens_per_group": dict(self.tokens_per_group),
            "rho_train": self.rho_train,
            "rho_ood": self.rho_ood,
            "edit_scope": self.edit_scope,
            "sentence_length": self.sentence_length,
            "causal_per_sentence": self.causal_per_sentence,
            "correlated_per_sentence": self.correlated_per_sentence,
            "n_ood": self.n_ood,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GeneratedDataset:
    train_pairs: list[PairedExample]
    ood: list[Example]
    ood_stress: list[Example]
    groups: FeatureGroups
    config: GeneratorConfig

    def train_examples(self) -> list[Example]:
        out = []
        for p in self.train_pairs:
            out.extend(p.members())
        return out


def _build_group_tokens(cfg: GeneratorConfig):
    tpg = cfg.tokens_per_group
    edited = {c: [f"edit{c}_{i}" for i in range(tpg["edited"])] for c in range(cfg.n_classes)}
    nonedited = {c: [f"non{c}_{i}" for i in range(tpg["nonedited"])] for c in range(cfg.n_classes)}
    correlated = {c: [f"cor{c}_{i}" for i in range(tpg["correlated"])] for c in range(cfg.n_classes)}
    noise = [f"noise_{i}" for i in range(tpg["noise"])]
    groups = FeatureGroups(
        edited_causal=frozenset(t for ts in edited.values() for t in ts),
        nonedited_causal=frozenset(t for ts in nonedited.values() for t in ts),
        correlated=frozenset(t for ts in correlated.values() for t in ts),
        noise=frozenset(noise),
    )
    return edited, nonedited, correlated, noise, groups


def _line_groups(tokens, groups: FeatureGroups) -> dict:
    return {
        "edited": [t for t in tokens if t in groups.edited_causal],
        "nonedited": [t for t in tokens if t in groups.nonedited_causal],
        "correlated": [t for t in tokens if t in groups.correlated],
    }


def _make_sentence(cfg, rng, label, rho, edited, nonedited, correlated, noise):
    k_e = cfg.edited_per_sentence
    k_u = cfg.causal_per_sentence - k_e
    k_r = cfg.correlated_per_sentence
    k_n = cfg.sentence_length - cfg.causal_per_sentence - k_r
    toks = [rng.choice(edited[label]) for _ in range(k_e)]
    toks += [rng.choice(nonedited[label]) for _ in range(k_u)]
    for _ in range(k_r):
        if rng.random() < rho:
            cls = label
        else:
            others = [c for c in range(cfg.n_classes) if c != label]
            cls = others[rng.randrange(len(others))]
        toks.append(rng.choice(correlated[cls]))
    toks += [rng.choice(noise) for _ in range(k_n)]
    rng.shuffle(toks)
    return toks


def generate_cad(cfg: GeneratorConfig) -> GeneratedDataset:
    """Generate paired training data plus two OOD evaluation splits.

    Training originals carry edited and non-edited causal tokens consistent
    with their label and correlated tokens aligned with probability rho_train;
    each counterfactual flips the label and replaces exactly the edited-causal
    token positions, keeping everything else verbatim. The OOD split uses
    rho_ood for the correlated alignment; its stress variant additionally
    removes every edited-causal token. Deterministic given cfg.seed.
    """
    rng = random.Random(cfg.seed)
    edited, nonedited, correlated, noise, groups = _build_group_tokens(cfg)

    pairs = []
    for i in range(cfg.n_pairs):
        y = i % cfg.n_classes
        y_star = (y + 1) % cfg.n_classes
        toks = _make_sentence(cfg, rng, y, cfg.rho_train, edited, nonedited, correlated, noise)
        cf_toks = [rng.choice(edited[y_star]) if t in groups.edited_causal else t for t in toks]
        pid = f"p{i:06d}"
        ori = Example(id=f"{pid}o", tokens=tuple(toks), label=y, pair_id=pid,
                      variant=VARIANT_ORIGINAL, groups=_line_groups(toks, groups))
        cf = Example(id=f"{pid}c", tokens=tuple(cf_toks), label=y_star, pair_id=pid,
                     variant=VARIANT_COUNTERFACTUAL, groups=_line_groups(cf_toks, groups))
        pairs.append(PairedExample(ori, cf))

    ood = []
    ood_stress = []
    for i in range(cfg.n_ood):
        y = i % cfg.n_classes
        toks = _make_sentence(cfg, rng, y, cfg.rho_ood, edited, nonedited, correlated, noise)
        pid = f"q{i:06d}"
        ood.append(Example(id=f"{pid}o", tokens=tuple(toks), label=y, pair_id=pid,
                           variant=VARIANT_ORIGINAL, groups=_line_groups(toks, groups)))
        stress_toks = tuple(t for t in toks if t not in groups.edited_causal)
        ood_stress.append(Example(id=f"{pid}s", tokens=stress_toks, label=y, pair_id=f"{pid}s",
                                  variant=VARIANT_ORIGINAL,
                                  groups=_line_groups(stress_toks, groups)))
    return GeneratedDataset(pairs, ood, ood_stress, groups, cfg)


def write_dataset(dataset: GeneratedDataset, out_dir) -> dict:
    """Write train/ood/ood_stress JSONL files plus the group annotation file."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "train": os.path.join(out_dir, "train.jsonl"),
        "ood": os.path.join(out_dir, "ood.jsonl"),
        "ood_stress": os.path.join(out_dir, "ood_stress.jsonl"),
        "groups": os.path.join(out_dir, "groups.json"),
        "config": os.path.join(out_dir, "generator_config.json"),
    }
    dump_jsonl(dataset.train_examples(), paths["train"])
    dump_jsonl(dataset.ood, paths["ood"])
    dump_jsonl(dataset.ood_stress, paths["ood_stress"])
    with open(paths["groups"], "w", encoding="utf-8") as fh:
        json.dump(dataset.groups.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(dataset.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def read_dataset(data_dir) -> GeneratedDataset:
    """Load a dataset directory produced by write_dataset()."""
    import os
    train = load_jsonl(os.path.join(data_dir, "train.jsonl"), require_pairs=True)
    ood = load_jsonl(os.path.join(data_dir, "ood.jsonl"), require_pairs=False)
    stress_path = os.path.join(data_dir, "ood_stress.jsonl")
    ood_stress = load_jsonl(stress_path, require_pairs=False) if os.path.exists(stress_path) else []
    with open(os.path.join(data_dir, "groups.json"), encoding="utf-8") as fh:
        groups = FeatureGroups.from_dict(json.load(fh))
    cfg_path = os.path.join(data_dir, "generator_config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path, encoding="utf-8") as fh:
            cfg = GeneratorConfig.from_dict(json.load(fh))
    else:
        cfg = GeneratorConfig()
    return GeneratedDataset(pair_examples(train), ood, ood_stress, groups, cfg)

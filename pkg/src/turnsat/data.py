"""Conversational session data model, synthetic corpus, and split construction.

Sessions are ordered utterance/response turns with one targeted turn whose
satisfaction is being judged. The synthetic generator builds sessions from
per-skill template grammars: satisfying sessions pair requests with coherent
fulfilling responses, dissatisfying ones embed failure patterns (a reworded
repeat after a failure, a barge-in "stop" after a wrong item, an unhandled
request). Responses echo the request's verb and item, so a session whose
targeted turn was swapped with another session's is detectable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

SAT = "SAT"
DSAT = "DSAT"


class ConfigError(ValueError):
    """Invalid generation or split configuration."""


class DomainError(ValueError):
    """A value outside its documented domain."""


@dataclass(frozen=True)
class Turn:
    utterance: tuple[int, ...]
    response: tuple[int, ...]
    raw_utterance: str
    raw_response: str


@dataclass(frozen=True)
class Session:
    turns: tuple[Turn, ...]
    targeted_index: int
    skill: str
    label: str | None = None
    score: int | None = None

    def __post_init__(self):
        if len(self.turns) < 1:
            raise ValueError("a session needs at least one turn")
        if not 0 <= self.targeted_index < len(self.turns):
            raise ValueError(
                f"targeted_index {self.targeted_index} out of range for "
                f"{len(self.turns)} turns"
            )
        if self.label is not None and self.score is not None:
            if self.label != score_to_label(self.score):
                raise ValueError(f"label {self.label} inconsistent with score {self.score}")

    def identity(self) -> tuple:
        """Session identity for overlap checks: all raw turn texts."""
        return tuple((t.raw_utterance, t.raw_response) for t in self.turns)

    @property
    def targeted(self) -> Turn:
        return self.turns[self.targeted_index]


@dataclass
class DatasetSplits:
    train: list[Session]
    validation: list[Session]
    test_in_domain: list[Session]
    test_out_of_domain: list[Session]
    unsup_train: list[Session]
    unsup_validation: list[Session]


@dataclass
class GeneratorConfig:
    num_skills_major: int = 12
    num_skills_minor: int = 30
    num_labeled: int = 5000
    num_unlabeled: int = 20000
    sat_ratio: float = 3.0
    vocab_size: int = 600
    max_pad_turns: int = 2
    items_per_skill: int = 10
    minor_unsup_share: float = 0.25
    seed: int = 0

    def validate(self):
        if self.num_skills_major < 1 or self.num_skills_minor < 0:
            raise ConfigError("need at least one major skill")
        if self.num_labeled < 1 or self.num_unlabeled < 0:
            raise ConfigError("corpus sizes must be positive")
        if self.sat_ratio <= 0:
            raise ConfigError("sat_ratio must be positive")
        if self.num_labeled < 12 * self.num_skills_minor:
            raise ConfigError(
                "num_labeled too small for the minor-skill pool; "
                "reduce num_skills_minor or add sessions"
            )


def score_to_label(score: int) -> str:
    """Map a 1-5 quality score to SAT/DSAT; 3 and above is satisfying."""
    if not isinstance(score, (int, np.integer)) or not 1 <= score <= 5:
        raise DomainError(f"score must be an integer in 1..5, got {score!r}")
    return SAT if score >= 3 else DSAT


def window(session: Session, T: int) -> Session:
    """Restrict a session to at most T turns on each side of the targeted one."""
    if T < 0:
        raise DomainError("window size must be nonnegative")
    lo = max(0, session.targeted_index - T)
    hi = min(len(session.turns), session.targeted_index + T + 1)
    return replace(
        session,
        turns=session.turns[lo:hi],
        targeted_index=session.targeted_index - lo,
    )


# -- template grammar -------------------------------------------------------

_FUNCTION_WORDS = [
    "please", "now", "again", "the", "yes", "no", "stop", "cancel", "thanks",
    "you", "are", "welcome", "ok", "sure", "alright", "did", "mean", "sorry",
    "i", "cannot", "find", "am", "not", "help", "with", "that",
]
_VERBS = [
    "play", "check", "open", "call", "set", "queue", "tell", "show",
    "start", "run", "ask", "make",
]
_SKILL_BASES = [
    "music", "weather", "timer", "calls", "lights", "trivia", "news",
    "recipes", "sports", "shopping", "travel", "jokes", "calendar",
    "fitness", "radio", "alarm", "stocks", "movies", "garden", "pets",
]
_ACKS = ["ok", "sure", "alright"]


@dataclass(frozen=True)
class _SkillDef:
    name: str
    verb: str
    items: tuple[str, ...]
    minor: bool


@dataclass(frozen=True)
class _Grammar:
    skills: tuple[_SkillDef, ...]
    vocab: dict[str, int]


def _pseudowords():
    # deterministic inventory of content words for item names
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    syllables = [c + v for c in consonants for v in vowels]
    for a in syllables:
        for b in syllables:
            w = a + b
            if w not in _FUNCTION_WORDS:
                yield w


def build_grammar(cfg: GeneratorConfig) -> _Grammar:
    cfg.validate()
    words = _pseudowords()
    skills = []
    total = cfg.num_skills_major + cfg.num_skills_minor
    for k in range(total):
        base = _SKILL_BASES[k % len(_SKILL_BASES)]
        name = f"{base}{k}"
        items = tuple(next(words) for _ in range(cfg.items_per_skill))
        skills.append(
            _SkillDef(name=name, verb=_VERBS[k % len(_VERBS)], items=items,
                      minor=k >= cfg.num_skills_major)
        )
    tokens = list(dict.fromkeys(_FUNCTION_WORDS + _VERBS))
    for s in skills:
        tokens.append(s.name)
        tokens.extend(s.items)
    if len(tokens) > cfg.vocab_size:
        raise ConfigError(
            f"vocab_size {cfg.vocab_size} too small: templates need {len(tokens)} tokens"
        )
    vocab = {w: i for i, w in enumerate(tokens)}
    return _Grammar(skills=tuple(skills), vocab=vocab)


def build_vocab(cfg: GeneratorConfig) -> dict[str, int]:
    return build_grammar(cfg).vocab


def _mk_turn(vocab, u_words, r_words) -> Turn:
    return Turn(
        utterance=tuple(vocab[w] for w in u_words),
        response=tuple(vocab[w] for w in r_words),
        raw_utterance=" ".join(u_words),
        raw_response=" ".join(r_words),
    )


def _request(rng, skill: _SkillDef, item: str) -> list[str]:
    tail = rng.choice(["please", "now", ""])
    words = [skill.verb, item]
    if tail:
        words.append(tail)
    return words


def _fulfill(rng, skill: _SkillDef, item: str) -> list[str]:
    return [str(rng.choice(_ACKS)), skill.verb, item]


def _pad_turn(rng, vocab, skill: _SkillDef) -> Turn:
    item = str(rng.choice(skill.items))
    return _mk_turn(vocab, _request(rng, skill, item), _fulfill(rng, skill, item))


def _pattern_turns(rng, vocab, skill: _SkillDef, pattern: str):
    """Build the turns of one interaction pattern.

    Returns (turns, targeted offset within them, score).
    """
    item = str(rng.choice(skill.items))
    mk = lambda u, r: _mk_turn(vocab, u, r)
    if pattern == "fulfill":
        return [mk(_request(rng, skill, item), _fulfill(rng, skill, item))], 0, int(rng.choice([4, 5]))
    if pattern == "confirm":
        first = mk(_request(rng, skill, item), ["did", "you", "mean", item])
        second = mk(["yes"], [])
        return [first, second], 0, int(rng.choice([3, 4]))
    if pattern == "fulfill_thanks":
        first = mk(_request(rng, skill, item), _fulfill(rng, skill, item))
        second = mk(["thanks"], ["you", "are", "welcome"])
        return [first, second], 0, 5
    if pattern == "recovered_context":
        # an earlier failure already recovered; the targeted turn succeeds,
        # so failure wording in context must not drag the label down
        other = str(rng.choice([it for it in skill.items if it != item]))
        fail = mk(_request(rng, skill, other), ["sorry", "i", "cannot", "find", other])
        retry = mk([skill.verb, "the", other, "again"], _fulfill(rng, skill, other))
        hit = mk(_request(rng, skill, item), _fulfill(rng, skill, item))
        return [fail, retry, hit], 2, int(rng.choice([3, 4]))
    if pattern == "fulfill_then_stop":
        # the user simply being done is not dissatisfaction
        first = mk(_request(rng, skill, item), _fulfill(rng, skill, item))
        second = mk(["stop"], [])
        return [first, second], 0, int(rng.choice([4, 5]))
    if pattern == "repeat":
        # reworded repeat after a failure; the failed attempt is targeted
        first = mk(_request(rng, skill, item), ["sorry", "i", "cannot", "find", item])
        retry = mk([skill.verb, "the", item, "again"], _fulfill(rng, skill, item))
        return [first, retry], 0, 2
    if pattern == "wrong_item":
        other = str(rng.choice([it for it in skill.items if it != item]))
        first = mk(_request(rng, skill, item), _fulfill(rng, skill, other))
        barge = mk(["stop"], [])
        turns = [first, barge]
        if rng.random() < 0.5:
            turns.append(mk(_request(rng, skill, item), _fulfill(rng, skill, item)))
        return turns, 0, int(rng.choice([1, 2]))
    if pattern == "unhandled":
        if rng.random() < 0.5:
            fail = ["sorry", "i", "am", "not", "sure"]
        else:
            fail = [skill.name, "cannot", "help", "with", item]
        turns = [mk(_request(rng, skill, item), fail)]
        if rng.random() < 0.5:
            turns.append(mk(["cancel"], []))
        return turns, 0, int(rng.choice([1, 2]))
    raise ValueError(f"unknown pattern {pattern}")


_SAT_PATTERNS = ["fulfill", "confirm", "fulfill_thanks", "recovered_context",
                 "fulfill_then_stop"]
_SAT_WEIGHTS = [0.30, 0.20, 0.10, 0.20, 0.20]
# the wrong-item pattern carries no failure wording at all, so detecting it
# takes utterance/response coherence rather than token spotting
_DSAT_PATTERNS = ["repeat", "wrong_item", "unhandled"]
_DSAT_WEIGHTS = [0.25, 0.50, 0.25]


def _make_session(rng, vocab, skill: _SkillDef, p_sat: float, labeled: bool,
                  max_pad: int) -> Session:
    if rng.random() < p_sat:
        pattern = str(rng.choice(_SAT_PATTERNS, p=_SAT_WEIGHTS))
    else:
        pattern = str(rng.choice(_DSAT_PATTERNS, p=_DSAT_WEIGHTS))
    core, offset, score = _pattern_turns(rng, vocab, skill, pattern)
    n_before = int(rng.integers(0, max_pad + 1))
    n_after = int(rng.integers(0, max_pad + 1))
    turns = (
        [_pad_turn(rng, vocab, skill) for _ in range(n_before)]
        + core
        + [_pad_turn(rng, vocab, skill) for _ in range(n_after)]
    )
    if labeled:
        return Session(
            turns=tuple(turns),
            targeted_index=n_before + offset,
            skill=skill.name,
            label=score_to_label(score),
            score=score,
        )
    return Session(turns=tuple(turns), targeted_index=n_before + offset, skill=skill.name)


def generate_corpus(cfg: GeneratorConfig) -> tuple[list[Session], list[Session]]:
    """Generate the labeled and unlabeled synthetic pools.

    Labeled sessions carry a score and the derived label; minor skills
    receive only a handful of labeled sessions each (they form the
    out-of-domain reserve), while the unlabeled pool covers all skills.
    """
    g = build_grammar(cfg)
    rng = np.random.default_rng(cfg.seed)
    p_sat = cfg.sat_ratio / (1.0 + cfg.sat_ratio)
    majors = [s for s in g.skills if not s.minor]
    minors = [s for s in g.skills if s.minor]

    labeled: list[Session] = []
    for skill in minors:
        for _ in range(int(rng.integers(2, 10))):
            labeled.append(_make_session(rng, g.vocab, skill, p_sat, True, cfg.max_pad_turns))
    if len(labeled) > cfg.num_labeled:
        raise ConfigError("minor-skill sessions exceed num_labeled")
    while len(labeled) < cfg.num_labeled:
        skill = majors[int(rng.integers(0, len(majors)))]
        labeled.append(_make_session(rng, g.vocab, skill, p_sat, True, cfg.max_pad_turns))

    unlabeled: list[Session] = []
    for _ in range(cfg.num_unlabeled):
        if minors and rng.random() < cfg.minor_unsup_share:
            skill = minors[int(rng.integers(0, len(minors)))]
        else:
            skill = majors[int(rng.integers(0, len(majors)))]
        unlabeled.append(_make_session(rng, g.vocab, skill, p_sat, False, cfg.max_pad_turns + 1))
    return labeled, unlabeled


# -- splits -------------------------------------------------------------------


def split_by_skill(
    labeled: list[Session],
    fractions: tuple[float, float] = (0.70, 0.15),
    out_of_domain_skill_fraction: float = 0.15,
    seed: int = 0,
    low_freq_max_sessions: int = 10,
) -> DatasetSplits:
    """Reserve a random subset of low-frequency skills for the out-of-domain
    test set, then split the remaining sessions train/val/test by session."""
    f_train, f_val = fractions
    if f_train <= 0 or f_val <= 0 or f_train + f_val >= 1:
        raise ConfigError(f"fractions must be positive and sum below 1, got {fractions}")
    rng = np.random.default_rng(seed)
    skills = sorted({s.skill for s in labeled})
    counts = {sk: 0 for sk in skills}
    for s in labeled:
        counts[s.skill] += 1
    n_out = int(round(out_of_domain_skill_fraction * len(skills)))
    if out_of_domain_skill_fraction > 0:
        n_out = max(1, n_out)
    pool = [sk for sk in skills if counts[sk] <= low_freq_max_sessions]
    if len(pool) < n_out:
        raise ConfigError(
            f"need {n_out} low-frequency skills for the out-of-domain set, "
            f"only {len(pool)} have <= {low_freq_max_sessions} sessions"
        )
    reserved = set(rng.choice(pool, size=n_out, replace=False).tolist())

    test_out = [s for s in labeled if s.skill in reserved]
    rest = [s for s in labeled if s.skill not in reserved]
    order = rng.permutation(len(rest))
    n_train = int(round(f_train * len(rest)))
    n_val = int(round(f_val * len(rest)))
    train = [rest[i] for i in order[:n_train]]
    validation = [rest[i] for i in order[n_train:n_train + n_val]]
    test_in = [rest[i] for i in order[n_train + n_val:]]

    # in-domain test skills must be covered by train
    train_skills = {s.skill for s in train}
    moved = [s for s in test_in if s.skill not in train_skills]
    if moved:
        test_in = [s for s in test_in if s.skill in train_skills]
        train = train + moved
    return DatasetSplits(
        train=train,
        validation=validation,
        test_in_domain=test_in,
        test_out_of_domain=test_out,
        unsup_train=[],
        unsup_validation=[],
    )


def split_unsup(unlabeled: list[Session], seed: int = 0) -> tuple[list[Session], list[Session]]:
    """80/20 random split with no skill constraint; validation size floors."""
    if not unlabeled:
        raise ConfigError("cannot split an empty unlabeled pool")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(unlabeled))
    n_val = len(unlabeled) // 5
    val = [unlabeled[i] for i in order[:n_val]]
    train = [unlabeled[i] for i in order[n_val:]]
    return train, val


def build_splits(
    labeled: list[Session],
    unlabeled: list[Session],
    fractions: tuple[float, float] = (0.70, 0.15),
    out_of_domain_skill_fraction: float = 0.15,
    seed: int = 0,
    low_freq_max_sessions: int = 10,
) -> DatasetSplits:
    """Full split construction including the unlabeled pool.

    Unlabeled sessions identical to any evaluation session are dropped
    before the unsup split so the pools never overlap.
    """
    splits = split_by_skill(
        labeled, fractions, out_of_domain_skill_fraction, seed, low_freq_max_sessions
    )
    eval_ids = {
        s.identity()
        for part in (splits.validation, splits.test_in_domain, splits.test_out_of_domain)
        for s in part
    }
    clean = [s for s in unlabeled if s.identity() not in eval_ids]
    splits.unsup_train, splits.unsup_validation = split_unsup(clean, seed)
    validate_splits(splits)
    return splits


def validate_splits(splits: DatasetSplits) -> None:
    train_skills = {s.skill for s in splits.train}
    out_skills = {s.skill for s in splits.test_out_of_domain}
    if train_skills & out_skills:
        raise ValueError(f"out-of-domain skills leak into train: {train_skills & out_skills}")
    missing = {s.skill for s in splits.test_in_domain} - train_skills
    if missing:
        raise ValueError(f"in-domain test skills missing from train: {missing}")
    eval_ids = {
        s.identity()
        for part in (splits.validation, splits.test_in_domain, splits.test_out_of_domain)
        for s in part
    }
    for part in (splits.unsup_train, splits.unsup_validation):
        for s in part:
            if s.identity() in eval_ids:
                raise ValueError("unlabeled session overlaps an evaluation session")


# -- batching -----------------------------------------------------------------


def make_batches(
    data: list[Session],
    batch_size: int,
    seed: int,
    augment_window: bool = False,
    window_T: int | None = None,
) -> list[list[Session]]:
    """Shuffle into batches for one epoch.

    With ``augment_window`` a fresh targeted index is drawn uniformly per
    session (for unlabeled data, where any turn may be targeted). When
    ``window_T`` is given every session is windowed. A trailing batch of
    size 1 is dropped: noise generation needs at least two sessions.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    sessions = []
    for i in order:
        s = data[i]
        if augment_window:
            s = replace(s, targeted_index=int(rng.integers(0, len(s.turns))))
        if window_T is not None:
            s = window(s, window_T)
        sessions.append(s)
    batches = [sessions[i:i + batch_size] for i in range(0, len(sessions), batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


# -- serialization --------------------------------------------------------------


def save_sessions(path, sessions: list[Session]) -> None:
    """One session per line: skill, turns as raw text pairs, targeted index,
    and score/label when present."""
    with open(path, "w") as fh:
        for s in sessions:
            rec = {
                "skill": s.skill,
                "targeted_index": s.targeted_index,
                "turns": [[t.raw_utterance, t.raw_response] for t in s.turns],
            }
            if s.score is not None:
                rec["score"] = s.score
            if s.label is not None:
                rec["label"] = s.label
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_sessions(path, vocab: dict[str, int]) -> list[Session]:
    sessions = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            turns = tuple(
                Turn(
                    utterance=tuple(vocab[w] for w in u.split()),
                    response=tuple(vocab[w] for w in r.split()),
                    raw_utterance=u,
                    raw_response=r,
                )
                for u, r in rec["turns"]
            )
            sessions.append(
                Session(
                    turns=turns,
                    targeted_index=rec["targeted_index"],
                    skill=rec["skill"],
                    label=rec.get("label"),
                    score=rec.get("score"),
                )
            )
    return sessions


def save_vocab(path, vocab: dict[str, int]) -> None:
    with open(path, "w") as fh:
        json.dump(vocab, fh, sort_keys=True, separators=(",", ":"))


def load_vocab(path) -> dict[str, int]:
    with open(path) as fh:
        return json.load(fh)

"""Prompt stage texts and the sentence templates used by the mock annotator.

The template vocabulary doubles as the corpus the default tokenizer is built
from, so every mock caption tokenizes without byte fallback.
"""

from __future__ import annotations

import random
from typing import Iterable, Optional, Sequence

from .data import AU_IDS, EMOTION_PROTOTYPES, EMOTIONS

CAPTION_TYPES = ("au", "emotion", "key_au")

# Token budgets (CLS included) per caption type.
CAPTION_MAX_TOKENS = {"au": 169, "emotion": 61, "key_au": 169}

AU_NAMES = {
    1: "inner brow raiser",
    2: "outer brow raiser",
    4: "brow lowerer",
    6: "cheek raiser",
    7: "lid tightener",
    10: "upper lip raiser",
    12: "lip corner puller",
    15: "lip corner depressor",
    23: "lip tightener",
    24: "lip pressor",
    25: "lips part",
    26: "jaw drop",
}

AU_EFFECTS = {
    1: "inner brows lifted",
    2: "outer brows arched",
    4: "brows drawn together",
    6: "cheeks pushed up",
    7: "eyelids narrowed",
    10: "upper lip raised",
    12: "mouth corners pulled up",
    15: "mouth corners turned down",
    23: "lips tightened",
    24: "lips pressed firmly",
    25: "lips slightly apart",
    26: "jaw dropped open",
}

AU_CUES = {
    1: "raised inner brows",
    2: "arched outer brows",
    4: "a furrowed brow",
    6: "lifted cheeks",
    7: "narrowed eyes",
    10: "a raised upper lip",
    12: "upturned mouth corners",
    15: "downturned mouth corners",
    23: "tight lips",
    24: "pressed lips",
    25: "parted lips",
    26: "an open jaw",
}

EMOTION_READINGS = {
    "Neutral": "a calm and composed state",
    "Anger": "irritation or hostility",
    "Disgust": "aversion to something unpleasant",
    "Fear": "alarm at a perceived threat",
    "Happiness": "genuine enjoyment",
    "Sadness": "low mood or disappointment",
    "Surprise": "reaction to something unexpected",
    "Other": "a blended or ambiguous feeling",
}

_ACTIVE_VERBS = ("active", "present", "visible")
_INACTIVE_VERBS = ("absent", "inactive", "not present")
_EMOTION_OPENERS = ("The face shows", "The person appears to feel", "This expression conveys")
_EMOTION_CLOSERS = ("Overall the expression suggests", "Together these cues indicate", "This points to")
_KEY_OPENERS = ("The key action units for", "The most decisive action units for")

ROLE_TEXT = {
    "emotion": "You are an emotion description expert.",
    "au": "You are an AU description expert trained in the Facial Action Coding System.",
    "key_au": "You are an expert in facial action units and emotion analysis.",
}

TASK_TEXT = {
    "emotion": ("You will see a face image with its annotated emotion category. "
                "Explain which visible facial cues support that emotion."),
    "au": ("You will see a face image with its annotated action units. "
           "Describe every action unit in order and say whether it is active."),
    "key_au": ("You will see a face image with its annotated action units and emotion. "
               "Identify the most influential action units that determine the emotion, "
               "without restating every unit."),
}

FORMAT_TEXT = {
    "emotion": ("Q: Emotion: Sadness. Describe the face.\n"
                "A: The person appears to feel Sadness. Visible cues include raised inner brows "
                "and downturned mouth corners. Together these cues indicate low mood or disappointment."),
    "au": ("Q: Active AUs: AU1, AU4. Describe every action unit.\n"
           "A: AU1 inner brow raiser active, inner brows lifted. AU2 outer brow raiser absent. "
           "AU4 brow lowerer active, brows drawn together. ..."),
    "key_au": ("Q: Emotion: Happiness. Active AUs: AU6, AU12, AU25. Which action units matter most?\n"
               "A: The key action units for Happiness are AU6 and AU12, with lifted cheeks and "
               "upturned mouth corners."),
}

SIGNAL_TEXT = ("Now write the caption for the attached image from the ground truth below, "
               "following the example format and staying within {budget} tokens.")


def render_au_payload(au_labels: Sequence[int]) -> str:
    active = [f"AU{a}" for a, v in zip(AU_IDS, au_labels) if v]
    inactive = [f"AU{a}" for a, v in zip(AU_IDS, au_labels) if not v]
    return f"Active AUs: {', '.join(active) or 'none'}. Inactive AUs: {', '.join(inactive) or 'none'}."


def render_emotion_payload(emotion: str) -> str:
    return f"Emotion: {emotion}."


def _join(items: Sequence[str]) -> str:
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + " and " + items[-1]


def key_aus(active: Sequence[int], emotion: str) -> list:
    proto = [a for a in active if a in EMOTION_PROTOTYPES[emotion]]
    return (proto or list(active))[:3]


def au_sentence(au: int, active: bool, rng: random.Random) -> str:
    if active:
        return f"AU{au} {AU_NAMES[au]} {rng.choice(_ACTIVE_VERBS)}, {AU_EFFECTS[au]}."
    return f"AU{au} {AU_NAMES[au]} {rng.choice(_INACTIVE_VERBS)}."


def mock_caption(caption_type: str, au_labels: Optional[Sequence[int]], emotion: Optional[str],
                 seed: int) -> str:
    """Deterministic caption from ground truth; a pure function of its arguments."""
    key = f"{seed}|{caption_type}|{tuple(au_labels) if au_labels is not None else None}|{emotion}"
    rng = random.Random(key)
    if caption_type == "au":
        return " ".join(au_sentence(a, bool(v), rng) for a, v in zip(AU_IDS, au_labels))
    if au_labels is None:
        active = list(EMOTION_PROTOTYPES[emotion])
    else:
        active = [a for a, v in zip(AU_IDS, au_labels) if v]
    if caption_type == "emotion":
        parts = [f"{rng.choice(_EMOTION_OPENERS)} {emotion}."]
        if active:
            cues = [AU_CUES[a] for a in key_aus(active, emotion)]
            parts.append(f"Visible cues include {_join(cues)}.")
        else:
            parts.append("The facial muscles look relaxed.")
        parts.append(f"{rng.choice(_EMOTION_CLOSERS)} {EMOTION_READINGS[emotion]}.")
        return " ".join(parts)
    if caption_type == "key_au":
        keys = key_aus(active, emotion)
        if not keys:
            return f"No single action unit dominates this {emotion} expression, the face stays relaxed."
        names = _join([f"AU{a}" for a in keys])
        cues = _join([AU_CUES[a] for a in keys])
        return f"{rng.choice(_KEY_OPENERS)} {emotion} are {names}, with {cues}."
    raise ValueError(caption_type)


def corpus() -> Iterable[str]:
    """Every fragment the templates can emit."""
    yield from ROLE_TEXT.values()
    yield from TASK_TEXT.values()
    yield from FORMAT_TEXT.values()
    yield SIGNAL_TEXT
    yield from EMOTIONS
    for a in AU_IDS:
        yield f"AU{a} {AU_NAMES[a]} {AU_EFFECTS[a]} {AU_CUES[a]}"
    yield from EMOTION_READINGS.values()
    yield from _ACTIVE_VERBS + _INACTIVE_VERBS + _EMOTION_OPENERS + _EMOTION_CLOSERS + _KEY_OPENERS
    yield "Visible cues include , and . The facial muscles look relaxed."
    yield "No single action unit dominates this expression, the face stays relaxed. are with"
    yield "Active AUs: none. Inactive AUs: Emotion:"

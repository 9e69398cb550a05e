"""Expected values for the metric oracles in acceptance.rs.

Counts use unicodedata (drop every P* character, keep everything else).
Cosines use numpy over float32 vectors averaged in float64.

Usage: python3 acceptance_oracle.py
"""
import unicodedata

import numpy as np


def n_story(text):
    return sum(1 for ch in text if not unicodedata.category(ch).startswith("P"))


def n_keyword(keywords):
    return sum(len(k) + 1 for k in keywords)


def ks(text, keywords):
    return (n_story(text) - n_keyword(keywords)) / n_story(text) * 100.0


KS_CASES = [
    ("I walked my dog in the park today", ["park", "dog"]),
    ("I walked my dog in the park today.", ["park", "dog"]),
    ("Hi, there!", ["hi"]),
    ("Last night I had dinner with friends at a Japanese place.", ["Japanese", "food", "dinner with friends"]),
    ("We went to the beach. The sea was cold!", ["beach", "sea", "cold"]),
    ("It's my sister's birthday; we baked a cake.", ["birthday", "cake", "sister"]),
    ("Snow\nfell all night.\nWe walked.", ["snow", "walk"]),
    ("park dog", ["park", "dog"]),
    ("dog", ["dog"]),
    ("A long train ride to London, then tea by the river.", ["train", "London"]),
    ("“What a match!” said my grandson.", ["grandson", "football", "match"]),
    ("Café au lait - my favourite.", ["coffee"]),
    ("I remember a cup of coffee next to a book. It felt calm.", ["coffee", "book"]),
    ("Music, music, music...", ["concert", "music"]),
    ("   spaces   count   too   ", ["spaces"]),
    ("The garden (finally!) bloomed: roses, tulips & daisies.", ["garden", "flowers"]),
    ("x", []),
    ("Tabs\tare\tcharacters", ["tabs"]),
    ("We met at 7:30 and left at 9.", ["meeting", "time"]),
    ("I went to a concert tonight. The music was joyful and people danced in the hall.", ["concert", "music"]),
]

COUNT_CASES = [
    ("story", "Hi, there!"),
    ("story", ""),
    ("story", "a b"),
    ("story", "Wait... what?! (Really.)"),
    ("story", "line one\nline two"),
    ("story", "¿Qué tal?"),
    ("keywords", ["park", "dog"]),
    ("keywords", []),
    ("keywords", ["dinner with friends"]),
    ("keywords", ["it's", "x"]),
]

TABLE = {
    "sun": [1.0, 0.0, 0.0],
    "sea": [0.8, 0.6, 0.0],
    "beach": [0.6, 0.8, 0.0],
    "dog": [0.0, 1.0, 0.0],
    "park": [0.0, 0.6, 0.8],
    "cake": [0.0, 0.0, 1.0],
    "warm": [0.5, 0.5, 0.5],
    "cold": [-0.5, 0.2, 0.1],
}

SIM_CASES = [
    ("sun sea", "beach"),
    ("The dog in the park!", "dog"),
    ("warm cake", "cold sea"),
    ("Sun, SEA and beach.", "dog park"),
    ("cold", "sun"),
    ("beach dog cake", "warm warm sea"),
]


def doc(text):
    words = []
    for w in text.lower().split():
        w = "".join(ch for ch in w if not unicodedata.category(ch).startswith("P"))
        if w in TABLE:
            words.append(np.array(TABLE[w], dtype=np.float32).astype(np.float64))
    return np.mean(words, axis=0)


def cos(a, b):
    a, b = doc(a), doc(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


if __name__ == "__main__":
    print("KS")
    for text, kws in KS_CASES:
        print(f"  {n_story(text)} {n_keyword(kws)} {ks(text, kws)!r}")
    print("COUNT")
    for kind, x in COUNT_CASES:
        print(f"  {kind} {n_story(x) if kind == 'story' else n_keyword(x)}")
    print("SIM")
    for a, b in SIM_CASES:
        print(f"  {cos(a, b)!r}")

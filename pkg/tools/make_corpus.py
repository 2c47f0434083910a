#!/usr/bin/env python3
"""Generate the bundled byte-level training corpus (data/corpus.txt).

Deterministic synthetic prose: a fixed syllable lexicon sampled with a
Zipfian rank distribution, sentence/paragraph structure, digits, and a
long tail of rare accented letters and symbols (latin-1 bytes). The rare
tail matters: it gives the byte vocabulary the frequency skew that drives
the wide spread of embedding-row sharpness.
"""

import argparse
import random

ONSETS = ["b", "br", "c", "ch", "d", "dr", "f", "fl", "g", "gr", "h", "j",
          "k", "l", "m", "n", "p", "pl", "pr", "qu", "r", "s", "sh", "sl",
          "st", "str", "t", "th", "tr", "v", "w", "y", "z", ""]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou"]
CODAS = ["", "b", "ck", "d", "g", "l", "ll", "m", "n", "nd", "ng", "nt",
         "p", "r", "rd", "s", "st", "t", "th", "x"]

ACCENTED = "àáâãäåæçèéêëìíîïñòóôõöøùúûüýþß"
RARE_UPPER = "ÀÁÂÄÅÇÈÉÊËÍÎÑÓÔÖØÚÜ"
SYMBOLS = "@#$%&*+=<>[]{}()/\\|~^_\"'`§¡¿«»°±µ·×÷¢£¥¤¦¨¬­¯´¶¸¹º¼½¾"


def build_lexicon(rng: random.Random, size: int) -> list:
    words = set()
    while len(words) < size:
        syllables = rng.choices([1, 2, 3], weights=[5, 4, 1])[0]
        word = "".join(
            rng.choice(ONSETS) + rng.choice(VOWELS) + rng.choice(CODAS)
            for _ in range(syllables)
        )
        if 2 <= len(word) <= 12:
            words.add(word)
    return sorted(words)


def accent_word(rng: random.Random, word: str) -> str:
    out = list(word)
    for _ in range(rng.randint(1, 2)):
        out[rng.randrange(len(out))] = rng.choice(ACCENTED)
    if rng.random() < 0.2:
        out[0] = rng.choice(RARE_UPPER)
    return "".join(out)


def symbol_fragment(rng: random.Random) -> str:
    a, b = rng.choice(SYMBOLS), rng.choice(SYMBOLS)
    return f"{a}{rng.randint(0, 99)}{b}"


def generate(seed: int, target_bytes: int) -> str:
    rng = random.Random(seed)
    lexicon = build_lexicon(rng, 1600)
    rng.shuffle(lexicon)
    # Zipf weights over ranks; a small function-word core gets extra mass
    weights = [1.0 / (rank + 2.7) for rank in range(len(lexicon))]
    core = lexicon[:40]
    rare_words = [accent_word(rng, w) for w in rng.sample(lexicon, 160)]
    out = []
    size = 0
    sentence_in_paragraph = 0
    while size < target_bytes:
        n_words = rng.randint(4, 14)
        words = []
        for i in range(n_words):
            roll = rng.random()
            if roll < 0.35:
                w = rng.choice(core)
            elif roll < 0.358:
                w = rng.choice(rare_words)
            elif roll < 0.361:
                w = symbol_fragment(rng)
            else:
                w = rng.choices(lexicon, weights=weights)[0]
            if i == 0:
                w = w.capitalize()
            elif rng.random() < 0.01:
                w = w.capitalize()
            if rng.random() < 0.008:
                w = str(rng.randint(0, 99))
            words.append(w)
            if 0 < i < n_words - 1 and rng.random() < 0.06:
                words[-1] += rng.choice([",", ",", ";", ":"])
        sentence = " ".join(words) + rng.choices(
            [".", ".", ".", "?", "!"], weights=[6, 6, 6, 1, 1]
        )[0]
        out.append(sentence)
        size += len(sentence.encode("latin-1")) + 1
        sentence_in_paragraph += 1
        if sentence_in_paragraph >= rng.randint(3, 7):
            out.append("\n")
            sentence_in_paragraph = 0
        else:
            out.append(" ")
    return "".join(out).rstrip() + "\n"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/corpus.txt")
    parser.add_argument("--seed", type=int, default=20240601)
    parser.add_argument("--bytes", type=int, default=1_000_000)
    args = parser.parse_args()
    text = generate(args.seed, args.bytes)
    data = text.encode("latin-1")
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"wrote {len(data)} bytes, {len(set(data))} distinct byte values -> {args.out}")


if __name__ == "__main__":
    main()

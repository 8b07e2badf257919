#!/usr/bin/env python3
"""Regenerates the shipped toy corpora under data/.

corpus.txt  general narrative sentences (pretraining and the default tuning task)
task_a.txt  recipe lines (twin-merge task A)
task_b.txt  weather report lines (twin-merge task B)

Output is deterministic for a given --seed.
"""

import argparse
import pathlib
import random

SUBJECTS = ["the cat", "a small dog", "my old friend", "the teacher", "a young girl", "the farmer",
            "our neighbor", "the baker", "a tired bird", "the king", "his sister", "the old man",
            "a clever fox", "the doctor", "her brother", "the sailor"]
VERBS = ["sees", "likes", "finds", "carries", "paints", "keeps", "wants", "holds", "follows",
         "watches", "brings", "loses", "hides", "counts", "cleans", "sells"]
ADJS = ["red", "green", "small", "heavy", "bright", "quiet", "broken", "round", "wooden", "warm",
        "yellow", "strange", "soft", "tall"]
OBJECTS = ["ball", "book", "apple", "lamp", "boat", "hat", "letter", "basket", "stone", "cup",
           "chair", "kite", "bell", "coat"]
PLACES = ["in the garden", "near the river", "at the market", "under the tree", "on the hill",
          "in the kitchen", "by the door", "at the school", "in the forest", "on the bridge"]
TIMES = ["in the morning", "at night", "every day", "after lunch", "on sunday", "before dinner",
         "in the spring", "today"]
LINKS = ["because", "while", "and then", "but"]

DISHES = ["bread", "soup", "cake", "pie", "stew", "pancakes", "rice", "salad", "cookies", "pasta"]
INGREDIENTS = ["flour", "sugar", "milk", "butter", "salt", "water", "honey", "oil", "cream", "rice"]

CITIES = ["paris", "oslo", "cairo", "lima", "tokyo", "rome", "berlin", "dublin", "quito", "seoul"]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]
CONDS = ["sunny", "cloudy", "rainy", "windy", "foggy", "snowy", "stormy", "clear"]
WINDS = ["light", "strong", "calm", "gusty"]


def clause(rng):
    return "{} {} the {} {} {}".format(rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(ADJS),
                                       rng.choice(OBJECTS), rng.choice(PLACES))


def general_sentence(rng):
    s = clause(rng)
    if rng.random() < 0.4:
        s += " " + rng.choice(LINKS) + " " + clause(rng)
    if rng.random() < 0.5:
        s += " " + rng.choice(TIMES)
    return s + "."


def recipe_line(rng):
    a, b = rng.sample(INGREDIENTS, 2)
    return "to make {}, mix {} cups of {} with {} spoons of {} and bake for {} minutes.".format(
        rng.choice(DISHES), rng.randint(1, 9), a, rng.randint(1, 9), b, 5 * rng.randint(2, 12))


def weather_line(rng):
    return "on {} the weather in {} will be {} with a high of {} degrees and {} winds.".format(
        rng.choice(DAYS), rng.choice(CITIES), rng.choice(CONDS), rng.randint(-5, 35), rng.choice(WINDS))


def paragraphs(rng, make, n_bytes):
    out = []
    size = 0
    while size < n_bytes:
        para = " ".join(make(rng) for _ in range(rng.randint(3, 6))) + "\n"
        out.append(para)
        size += len(para)
    return "".join(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)
    (out / "corpus.txt").write_text(paragraphs(rng, general_sentence, 160_000))
    (out / "task_a.txt").write_text(paragraphs(rng, recipe_line, 40_000))
    (out / "task_b.txt").write_text(paragraphs(rng, weather_line, 40_000))


if __name__ == "__main__":
    main()

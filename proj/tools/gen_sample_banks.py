#!/usr/bin/env python3
"""Generate the small sample item banks and demonstration pools in data/.

Items are simple curriculum-style arithmetic questions with numerically
close distractors. Output is deterministic for a fixed seed.
"""
import json
import random
from fractions import Fraction
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "data"


def distinct_options(rng, correct, candidates):
    opts = [correct]
    for c in candidates:
        if c not in opts and c != "":
            opts.append(c)
        if len(opts) == 4:
            break
    if len(opts) < 4:
        return None, None
    rng.shuffle(opts)
    return opts, opts.index(correct)


def frac(f):
    return f"{f.numerator}/{f.denominator}" if f.denominator != 1 else str(f.numerator)


def measurement(rng):
    kind = rng.randrange(4)
    if kind == 0:
        ft = rng.randint(2, 19)
        c = ft * 12
        stem = f"How many inches are in {ft} feet?"
        cands = [c + 12, c - 12, ft * 10, c + 2, ft * 3]
        unit = ""
    elif kind == 1:
        kg = rng.randint(2, 29)
        c = kg * 1000
        stem = f"A bag of rice has a mass of {kg} kilograms. What is its mass in grams?"
        cands = [kg * 100, kg * 10000, c + 100, c - 1000]
    elif kind == 2:
        w, h = rng.randint(3, 25), rng.randint(3, 25)
        c = 2 * (w + h)
        stem = f"A rectangle is {w} cm long and {h} cm wide. What is its perimeter in centimeters?"
        cands = [w * h, w + h, c + 2, c - 2]
    else:
        hrs, mins = rng.randint(1, 9), rng.choice([5, 10, 15, 20, 25, 35, 40, 45, 50])
        c = hrs * 60 + mins
        stem = f"How many minutes are in {hrs} hours and {mins} minutes?"
        cands = [hrs * 100 + mins, c + 10, c - 10, hrs * 60]
    return stem, str(c), [str(x) for x in cands]


def base_ten(rng, grade):
    kind = rng.randrange(4)
    if kind == 0:
        n = rng.randint(1000, 99999) if grade == 4 else rng.randint(100000, 9999999)
        digits = str(n)
        pos = rng.randrange(len(digits) - 1)
        while digits[pos] == "0":
            pos = rng.randrange(len(digits) - 1)
        place = 10 ** (len(digits) - 1 - pos)
        d = int(digits[pos])
        c = d * place
        stem = f"What is the value of the digit {d} in {n:,}?"
        cands = [d * place * 10, d * max(place // 10, 1), d, d * place * 100]
    elif kind == 1:
        a, b = rng.randint(100, 999), rng.randint(11, 99)
        if grade == 5:
            a, b = rng.randint(1000, 9999), rng.randint(11, 99)
        c = a * b
        stem = f"Compute {a} × {b}."
        cands = [c + 10, c - 10, c + b, c + a]
    elif kind == 2:
        n = rng.randint(10000, 99999)
        c = round(n, -3)
        stem = f"Round {n:,} to the nearest thousand."
        cands = [round(n, -2), round(n, -4), c + 1000, c - 1000]
        return stem, f"{c:,}", [f"{x:,}" for x in cands]
    else:
        b = rng.randint(3, 9) if grade == 4 else rng.randint(12, 29)
        q = rng.randint(12, 99)
        a = b * q
        c = q
        stem = f"Compute {a} ÷ {b}."
        cands = [q + 1, q - 1, q + 10, q * 2]
    return stem, str(c), [str(x) for x in cands]


def fractions(rng, grade):
    kind = rng.randrange(3)
    if kind == 0:
        d = rng.choice([3, 4, 5, 6, 8, 10, 12])
        a, b = rng.randint(1, d - 1), rng.randint(1, d - 1)
        if grade == 5:
            d2 = rng.choice([2, 3, 4, 5, 6])
            while d2 == d:
                d2 = rng.choice([2, 3, 4, 5, 6, 7])
            f1, f2 = Fraction(a, d), Fraction(1, d2)
            stem = f"Compute {a}/{d} + 1/{d2}."
            c = f1 + f2
            cands = [Fraction(a + 1, d + d2), c + Fraction(1, d * d2), c - Fraction(1, d * d2), f1 - f2 if f1 > f2 else f2 - f1]
        else:
            stem = f"Compute {a}/{d} + {b}/{d}."
            c = Fraction(a + b, d)
            cands = [Fraction(a + b, 2 * d), Fraction(a + b + 1, d), Fraction(abs(a - b) or 1, d), c + 1]
        return stem, frac(c), [frac(x) for x in cands]
    if kind == 1:
        n, d = rng.randint(1, 5), rng.choice([2, 3, 4, 5, 6])
        if n >= d:
            n = d - 1
        m = rng.randint(2, 6)
        stem = f"Which fraction is equivalent to {n}/{d}?"
        c = f"{n * m}/{d * m}"
        cands = [f"{n * m}/{d * m + 1}", f"{n + m}/{d + m}", f"{n * m + 1}/{d * m}", f"{n}/{d * m}"]
        return stem, c, cands
    w = rng.randint(2, 12)
    d = rng.choice([3, 4, 5, 6, 8])
    n = rng.randint(1, d - 1)
    c = Fraction(w * n, d)
    stem = f"What is {w} × {n}/{d}?"
    cands = [Fraction(n, w * d), Fraction(w + n, d), c + Fraction(1, d), Fraction(w * n, d * d)]
    return stem, frac(c), [frac(x) for x in cands]


def algebraic(rng, grade):
    kind = rng.randrange(3)
    if kind == 0:
        a, m = rng.randint(3, 40), rng.randint(2, 9)
        c = a * m
        stem = f"Sam has {a} stickers. Maya has {m} times as many stickers as Sam. How many stickers does Maya have?"
        cands = [a + m, c + a, c - a, c + m]
    elif kind == 1:
        if grade == 5:
            a, b, x = rng.randint(2, 9), rng.randint(2, 9), rng.randint(2, 20)
            c = (a + x) * b
            stem = f"Evaluate ({a} + {x}) × {b}."
            cands = [a + x * b, c + b, c - b, a * x + b]
        else:
            n = rng.randint(12, 96)
            divisors = [k for k in range(2, n) if n % k == 0]
            if not divisors:
                n = 24
                divisors = [2, 3, 4, 6, 8, 12]
            c = rng.choice(divisors)
            non = [k for k in range(2, 20) if n % k != 0]
            stem = f"Which number is a factor of {n}?"
            cands = rng.sample(non, 3)
    else:
        start, step = rng.randint(1, 30), rng.randint(3, 15)
        seq = [start + i * step for i in range(4)]
        c = start + 4 * step
        stem = "What number comes next in the pattern " + ", ".join(map(str, seq)) + ", ...?"
        cands = [c + 1, c - 1, c + step, c - step]
    return stem, str(c), [str(x) for x in cands]


def make_bank(grade, skills, per_skill, gens, rng):
    items, stems = [], set()
    for (sid, _), count, gen in zip(skills, per_skill, gens):
        made = 0
        while made < count:
            stem, correct, cands = gen(rng)
            if stem in stems:
                continue
            opts, idx = distinct_options(rng, correct, cands)
            if opts is None:
                continue
            stems.add(stem)
            made += 1
            items.append({"id": f"g{grade}-{sid}-{made:02d}", "skill": sid,
                          "stem": stem, "options": opts, "answer_index": idx})
    return {"grade": grade,
            "skills": [{"id": s, "name": n} for s, n in skills],
            "items": items}, stems


def make_pool(skills, gens, rng, stems):
    pool = []
    for (sid, _), gen in zip(skills, gens):
        for _ in range(2):
            while True:
                stem, correct, cands = gen(rng)
                if stem not in stems:
                    break
            wrong = next(c for c in cands if c != correct)
            pool.append({"skill": sid,
                         "correct_demo": f"Q: {stem} Student answer: {correct}",
                         "incorrect_demo": f"Q: {stem} Student answer: {wrong}"})
    return pool


def main():
    rng = random.Random(20240514)
    g4_skills = [("S4.1", "Measurement & Data"), ("S4.2", "Number & Operations (Base)"),
                 ("S4.3", "Number & Operations (Fractions)"), ("S4.4", "Operations & Algebraic")]
    g4_gens = [measurement, lambda r: base_ten(r, 4), lambda r: fractions(r, 4), lambda r: algebraic(r, 4)]
    g5_skills = [("S5.1", "Number & Operations (Base)"), ("S5.2", "Number & Operations (Fractions)"),
                 ("S5.3", "Operations & Algebraic")]
    g5_gens = [lambda r: base_ten(r, 5), lambda r: fractions(r, 5), lambda r: algebraic(r, 5)]

    g4, s4 = make_bank(4, g4_skills, [25, 25, 25, 25], g4_gens, rng)
    g5, s5 = make_bank(5, g5_skills, [34, 33, 33], g5_gens, rng)
    OUT.mkdir(exist_ok=True)
    for name, obj in [("g4_sample.json", g4), ("g5_sample.json", g5),
                      ("g4_example_pool.json", make_pool(g4_skills, g4_gens, rng, s4 | s5)),
                      ("g5_example_pool.json", make_pool(g5_skills, g5_gens, rng, s4 | s5))]:
        (OUT / name).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Writes the bundled example datasets to examples_data/.

sat.csv       students x teachers crossed random intercepts (122 x 12)
twins.csv     MZ and DZ twin pairs plus a few singletons, ACE generated
twins_pedigree.csv

Deterministic: re-running reproduces the files exactly.
"""
import math
import os
import random

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "examples_data")


def sat(rng):
    students, teachers, years = 122, 12, 3
    s_eff = [rng.gauss(0.0, 30.0) for _ in range(students)]
    t_eff = [rng.gauss(0.0, 15.0) for _ in range(teachers)]
    rows = []
    for s in range(students):
        lunch = 1 if rng.random() < 0.4 else 0
        for year in range(years):
            # Some students miss a year.
            if year > 0 and rng.random() < 0.1:
                continue
            t = rng.randrange(teachers)
            y = 600.0 + 20.0 * year - 15.0 * lunch + s_eff[s] + t_eff[t] + rng.gauss(0.0, 20.0)
            rows.append((f"s{s + 1:03d}", f"t{t + 1:02d}", year, lunch, round(y, 3)))
    with open(os.path.join(OUT, "sat.csv"), "w", newline="\n") as f:
        f.write("student,teacher,year,lunch,math\n")
        for r in rows:
            f.write("%s,%s,%d,%d,%.3f\n" % r)
    with open(os.path.join(OUT, "sat.spec"), "w", newline="\n") as f:
        f.write(
            "# Crossed random intercepts for students and teachers.\n"
            "response = math\n"
            "fixed = year, lunch\n"
            "random = student, teacher\n"
            "criterion = ReML\n"
            "method = FSFS\n"
            "contrast.year_and_lunch = year; lunch\n"
        )


def twins(rng):
    var_a, var_c, var_e = 2.0, 1.0, 1.0
    data, ped = [], []
    fam = 0

    def add(members, kind):
        nonlocal fam
        fam += 1
        fid = f"f{fam:03d}"
        shared_a = rng.gauss(0.0, 1.0)
        c = rng.gauss(0.0, math.sqrt(var_c))
        for m in members:
            if kind == "MZ":
                a = shared_a
            elif kind == "DZ":
                a = math.sqrt(0.5) * shared_a + math.sqrt(0.5) * rng.gauss(0.0, 1.0)
            else:
                a = rng.gauss(0.0, 1.0)
            age = rng.gauss(0.0, 1.0)
            y = 1.0 + 0.5 * age + math.sqrt(var_a) * a + c + rng.gauss(0.0, math.sqrt(var_e))
            data.append((fid, m, round(age, 4), round(y, 4)))
        if kind in ("MZ", "DZ"):
            ped.append((fid, members[0], members[1], kind, "yes"))
        else:
            ped.append((fid, members[0], "", "", ""))

    for i in range(150):
        add([f"mz{i}a", f"mz{i}b"], "MZ")
    for i in range(150):
        add([f"dz{i}a", f"dz{i}b"], "DZ")
    for i in range(40):
        add([f"single{i}"], "single")
    with open(os.path.join(OUT, "twins.csv"), "w", newline="\n") as f:
        f.write("family,subject,age,score\n")
        for r in data:
            f.write("%s,%s,%.4f,%.4f\n" % r)
    with open(os.path.join(OUT, "twins_pedigree.csv"), "w", newline="\n") as f:
        f.write("family,member_a,member_b,relation,reared_together\n")
        for r in ped:
            f.write(",".join(r) + "\n")
    with open(os.path.join(OUT, "twins.spec"), "w", newline="\n") as f:
        f.write(
            "# ACE decomposition of score, adjusted for age.\n"
            "response = score\n"
            "fixed = age\n"
            "family = family\n"
            "member = subject\n"
        )


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    sat(random.Random(20240501))
    twins(random.Random(20240502))

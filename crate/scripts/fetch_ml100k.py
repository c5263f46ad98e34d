#!/usr/bin/env python3
"""Fetch MovieLens-100K and convert it to the tab-separated layout read by
`llrec prepare --format tsv`.

MovieLens data may not be redistributed, so it is downloaded on demand and
kept out of version control.

    python3 scripts/fetch_ml100k.py [--out data/ml-100k]
    python3 scripts/fetch_ml100k.py --recbole DIR   # RecBole atomic files

Outputs:
    interactions.tsv  user \t item \t rating \t timestamp
    items.tsv         item \t title (year) \t genres separated by spaces
"""

import argparse
import csv
import io
import pathlib
import sys
import urllib.request
import zipfile

URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def from_zip(blob):
    z = zipfile.ZipFile(io.BytesIO(blob))
    data = z.read("ml-100k/u.data").decode("latin-1")
    inter = [line.split("\t")[:4] for line in data.splitlines() if line.strip()]
    items = []
    for line in z.read("ml-100k/u.item").decode("latin-1").splitlines():
        f = line.split("|")
        if len(f) < 24:
            continue
        genres = [g for g, flag in zip(GENRES, f[5:24]) if flag == "1" and g != "unknown"]
        items.append((f[0], f[1].strip(), " ".join(genres)))
    return inter, items


def from_recbole(root):
    root = pathlib.Path(root)
    with open(root / "ml-100k.inter", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    inter = [r[:4] for r in rows[1:] if len(r) >= 4]
    items = []
    with open(root / "ml-100k.item", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))
    for r in rows[1:]:
        if len(r) < 2:
            continue
        year = r[2].strip() if len(r) > 2 else ""
        title = f"{r[1].strip()} ({year})" if year else r[1].strip()
        items.append((r[0], title, r[3].strip() if len(r) > 3 else ""))
    return inter, items


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/ml-100k")
    ap.add_argument("--recbole", help="directory with ml-100k.inter and ml-100k.item")
    args = ap.parse_args()
    if args.recbole:
        inter, items = from_recbole(args.recbole)
    else:
        with urllib.request.urlopen(URL) as r:
            inter, items = from_zip(r.read())
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        for r in inter:
            fh.write("\t".join(x.strip() for x in r) + "\n")
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        for i in items:
            fh.write("\t".join(i) + "\n")
    print(f"{len(inter)} interactions, {len(items)} items -> {out}", file=sys.stderr)


if __name__ == "__main__":
    main()

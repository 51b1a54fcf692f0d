#!/usr/bin/env python3
"""Download MovieLens-100K and write it as a tab-separated interaction log.

The output has a one-line header and columns user, item, rating, timestamp,
so train with `--skip-lines 1 --time-column 3` (tools/desk-ml100k.cfg sets both).
"""

import argparse
import io
import pathlib
import urllib.request
import zipfile

URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/ml-100k.inter", type=pathlib.Path)
    parser.add_argument("--url", default=URL)
    args = parser.parse_args()

    with urllib.request.urlopen(args.url) as response:
        archive = zipfile.ZipFile(io.BytesIO(response.read()))
    rows = archive.read("ml-100k/u.data").decode("latin-1").splitlines()

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", encoding="utf-8") as out:
        out.write("user_id:token\titem_id:token\trating:float\ttimestamp:float\n")
        for row in rows:
            user, item, rating, ts = row.split("\t")
            out.write(f"{user}\t{item}\t{rating}\t{ts}\n")
    print(f"wrote {len(rows)} interactions to {args.out}")


if __name__ == "__main__":
    main()

"""Rebuild data/ from the PyPI wheels that redistribute the UCI files.

Adult comes verbatim from the ``responsibly`` wheel.  Mushroom comes from the
``keel-ds`` wheel, which ships the 5,644-row copy with missing-value rows removed;
it is rewritten with the class column first, as in the UCI original.

    python3 scripts/fetch_datasets.py [--out data]
"""

import argparse
import hashlib
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

SOURCES = {
    ("responsibly", "0.1.2"): {
        "responsibly/dataset/adult/adult.data": "adult.data",
        "responsibly/dataset/adult/adult.test": "adult.test",
        "responsibly/dataset/adult/adult.names": "adult.names",
    },
    ("keel-ds", "0.2.5"): {
        "keel_ds/data/balanced/raw/mushroom.dat": "mushroom.csv",
    },
}


def download_wheel(name: str, version: str, dest: str) -> Path:
    # pip honours any configured index mirror
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "--only-binary", ":all:",
         "--timeout", "120", "--retries", "10", "-d", dest, f"{name}=={version}"],
        check=True, stdout=subprocess.DEVNULL,
    )
    return next(Path(dest).glob(name.replace("-", "_") + "-*.whl"))


def label_first(text: str) -> str:
    out = []
    for line in text.splitlines():
        if line.strip() and not line.startswith("@"):
            fields = line.split(",")
            out.append(",".join([fields[-1]] + fields[:-1]))
    return "\n".join(out) + "\n"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (name, version), members in SOURCES.items():
        with tempfile.TemporaryDirectory() as tmp:
            path = download_wheel(name, version, tmp)
            print(f"fetched {path.name}")
            wheel = zipfile.ZipFile(io.BytesIO(path.read_bytes()))
        for member, target in members.items():
            data = wheel.read(member)
            if target == "mushroom.csv":
                data = label_first(data.decode("utf-8")).encode("utf-8")
            (out / target).write_bytes(data)
            print(f"  {target}: {len(data)} bytes, sha256 {hashlib.sha256(data).hexdigest()[:16]}")


if __name__ == "__main__":
    main()

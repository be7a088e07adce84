"""File formats: matrix CSV, model JSON and 8-bit binary PGM."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import InvalidArgumentError

MODEL_FORMAT = "msc-model-v1"
_HEADER = re.compile(r"#\s*msc-matrix\s+rows=(\d+)\s+cols=(\d+)\s*$")


# ---------------------------------------------------------------------------
# matrices

def _fmt(v, integral):
    return str(int(v)) if integral else repr(float(v))


def format_matrix(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    integral = bool(np.all(X == np.round(X)) and np.all(np.abs(X) < 2 ** 53))
    lines = [f"# msc-matrix rows={X.shape[0]} cols={X.shape[1]}"]
    lines += [",".join(_fmt(v, integral) for v in row) for row in X]
    return "\n".join(lines) + "\n"


def write_matrix(path, X):
    Path(path).write_text(format_matrix(X))


def parse_matrix(text, source="<matrix>"):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise InvalidArgumentError(f"{source}: empty file")
    match = _HEADER.match(lines[0].strip())
    if not match:
        raise InvalidArgumentError(f"{source}: missing '# msc-matrix rows=<n> cols=<m>' header")
    rows, cols = int(match.group(1)), int(match.group(2))
    body = lines[1:]
    if len(body) != rows:
        raise InvalidArgumentError(f"{source}: header declares {rows} rows, found {len(body)}")
    out = np.empty((rows, cols))
    for i, ln in enumerate(body):
        parts = ln.split(",")
        if len(parts) != cols:
            raise InvalidArgumentError(f"{source}: row {i} has {len(parts)} values, header declares {cols}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise InvalidArgumentError(f"{source}: row {i}: {exc}") from None
    return out


def read_matrix(path):
    path = Path(path)
    return parse_matrix(path.read_text(), str(path))


def locations_path(path):
    """Companion ``<name>.loc.csv`` of a matrix file ``<name>.csv``."""
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".loc.csv")


def write_dataset(path, X, locations=None):
    write_matrix(path, X)
    written = [Path(path)]
    if locations is not None:
        loc = locations_path(path)
        write_matrix(loc, locations)
        written.append(loc)
    return written


# ---------------------------------------------------------------------------
# models

@dataclass
class ModelFile:
    family: str
    d: int
    dictionary: np.ndarray
    supports: list
    weights: np.ndarray
    sigma2: np.ndarray | None = None
    omega: np.ndarray | None = None
    bic: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_fit(cls, result, config):
        st = result.state
        return cls(
            family=config.family,
            d=int(result.d),
            dictionary=st.dictionary,
            supports=st.supports.bitstrings(),
            weights=st.weights,
            sigma2=st.sigma2,
            omega=st.omega,
            bic=[float(b) for b in result.bic],
            assignments=[int(a) for a in result.assignments],
            config=config.to_dict(),
        )

    def to_json(self):
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float).tolist()

        doc = {
            "format": MODEL_FORMAT,
            "family": self.family,
            "d": self.d,
            "shape": list(np.shape(self.dictionary)),
            "dictionary": arr(self.dictionary),
            "supports": list(self.supports),
            "weights": arr(self.weights),
            "sigma2": arr(self.sigma2),
            "omega": arr(self.omega),
            "bic": [float(b) for b in self.bic],
            "assignments": list(self.assignments),
            "config": self.config,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"model file is not valid JSON: {exc}") from None
        if doc.get("format") != MODEL_FORMAT:
            raise InvalidArgumentError(f"unsupported model format {doc.get('format')!r}")

        def arr(a):
            return None if a is None else np.array(a, dtype=float)

        D = np.array(doc["dictionary"], dtype=float).reshape(doc["shape"])
        return cls(
            family=doc["family"],
            d=int(doc["d"]),
            dictionary=D,
            supports=list(doc["supports"]),
            weights=arr(doc["weights"]),
            sigma2=arr(doc["sigma2"]),
            omega=arr(doc["omega"]),
            bic=list(doc["bic"]),
            assignments=list(doc["assignments"]),
            config=doc["config"],
        )


def write_model(path, model):
    Path(path).write_text(model.to_json())


def read_model(path):
    return ModelFile.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# images

def _pgm_tokens(data):
    """Header tokens of a PGM file and the offset of the pixel payload."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise InvalidArgumentError("truncated PGM header")
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pgm(path):
    """Binary 8-bit PGM as a ``(height, width)`` uint8 array."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != "P5":
        raise InvalidArgumentError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InvalidArgumentError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise InvalidArgumentError(f"{path}: only maxval 255 is supported, got {maxval}")
    payload = data[offset:offset + width * height]
    if len(payload) != width * height:
        raise InvalidArgumentError(f"{path}: expected {width * height} pixels, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise InvalidArgumentError("PGM images must be 2-D")
    pixels = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())

"""Scenario files: INI with a schema version; unknown sections or keys are hard errors."""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path

from .transport import BANDWIDTH_PRESETS

SCHEMA_VERSION = 1
KINDS = ("decode", "fc1_counting", "kv_trace")


class ScenarioError(ValueError):
    """Malformed scenario; ``line`` is 1-based when known."""

    def __init__(self, msg: str, source: str = "<scenario>", line: int | None = None):
        self.source, self.line = source, line
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {msg}")


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _float(v: str) -> float:
    x = float(v)
    if math.isnan(x):
        raise ValueError("nan not allowed")
    return x


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "auto") else int(v)


def _choice(*opts):
    def conv(v: str) -> str:
        v = v.strip()
        if v not in opts:
            raise ValueError(f"expected one of {', '.join(opts)}")
        return v

    return conv


# section -> key -> (converter, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "scenario": {
        "schema": (int, None),
        "name": (str, "scenario"),
        "kind": (_choice(*KINDS), "decode"),
        "seed": (int, 0),
    },
    "model": {
        "hidden": (int, 256),
        "heads": (int, 8),
        "head_dim": (int, 32),
        "ffn": (int, 1024),
        "layers": (int, 2),
        "vocab": (int, 64),
        "max_len": (int, 128),
        "activation": (_choice("relu"), "relu"),
        "weight_seed": (int, 0),
        "ffn_rank": (int, 16),
        "ffn_target_sparsity": (_float, 0.9),
        "silent_heads": (int, 2),
    },
    "ring": {
        "k": (_choice("64"), "64"),
        "f": (int, 16),
    },
    "run": {
        "backend": (_choice("dense", "spgemm", "sparse"), "sparse"),
        "source": (_choice("oracle", "predictor", "synthetic"), "oracle"),
        "ffn_sparsity": (_float, 0.9),
        "head_rate": (_float, 0.5),
        "structure": (_choice("column", "elementwise", "head"), "column"),
        "cache": (_choice("PR", "MR", "MR+prefetch"), "MR"),
        "dp_epsilon": (_float, math.inf),
        "trunc": (_choice("pair", "local"), "pair"),
        "prefetch_w": (_opt_int, None),
        "run_predictor": (_bool, True),
        "delta_oracle": (_float, 0.0),
        "prompt_len": (int, 32),
        "gen_len": (int, 8),
        "baseline": (_choice("dense", "none"), "dense"),
    },
    "counting": {
        "m": (int, 512),
        "n": (int, 4096),
        "p": (int, 16384),
        "sparsity": (_float, 0.9),
        "structure": (_choice("column", "elementwise"), "column"),
    },
    "kv": {
        "tokens": (int, 2048),
        "prompt_len": (int, 32),
        "rate": (_float, 0.5),
        "stickiness": (_float, 0.93),
        "spread": (_float, 0.9),
        "prefetch_w": (_opt_int, None),
    },
    "transport": {
        "bandwidth": (_choice(*BANDWIDTH_PRESETS), "5Gbps"),
        "rtt_ms": (_float, 0.5),
    },
    "cost": {
        "C": (int, 64),
        "model_file": (str, ""),
    },
    "output": {
        "dir": (str, "out"),
    },
}

# keys that do not change what is computed
NON_IDENTITY = {("output", "dir"), ("scenario", "name")}


@dataclass
class Scenario:
    values: dict  # section -> key -> value
    source: str = "<scenario>"
    base_dir: Path = Path(".")

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def kind(self) -> str:
        return self.values["scenario"]["kind"]

    @property
    def name(self) -> str:
        return self.values["scenario"]["name"]

    @property
    def seed(self) -> int:
        return self.values["scenario"]["seed"]

    def identity(self) -> dict:
        """Normalized values that determine the run (floats rendered with repr)."""
        out = {}
        for sec, kv in self.values.items():
            for k, v in kv.items():
                if (sec, k) in NON_IDENTITY:
                    continue
                out[f"{sec}.{k}"] = repr(v) if isinstance(v, float) else v
        return out

    def hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_value(self, section: str, key: str, value) -> "Scenario":
        """Copy with one value replaced; ``value`` may be a string (converted) or typed."""
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ScenarioError(f"unknown key {section}.{key}", self.source)
        conv = SCHEMA[section][key][0]
        if isinstance(value, str):
            try:
                value = conv(value)
            except ValueError as e:
                raise ScenarioError(f"{section}.{key}: {e}", self.source) from None
        vals = {s: dict(kv) for s, kv in self.values.items()}
        vals[section][key] = value
        return Scenario(vals, self.source, self.base_dir)


def _key_lines(text: str) -> dict:
    """``(section, key) -> line`` and ``(section, None) -> line`` from raw text."""
    out, sec = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            sec = m.group(1).strip()
            out.setdefault((sec, None), i)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", line)
        if m and sec is not None:
            out.setdefault((sec, m.group(1).strip()), i)
    return out


def parse_scenario(text: str, source: str = "<scenario>", base_dir: Path | None = None) -> Scenario:
    cp = configparser.ConfigParser(interpolation=None, default_section="__never__", inline_comment_prefixes=(";",))
    cp.optionxform = str  # keys are case sensitive (C)
    try:
        cp.read_string(text, source=source)
    except configparser.ParsingError as e:
        line = e.errors[0][0] if getattr(e, "errors", None) else None
        raise ScenarioError("syntax error", source, line) from None
    except configparser.Error as e:
        raise ScenarioError(str(e).splitlines()[0], source, getattr(e, "lineno", None)) from None
    lines = _key_lines(text)
    values: dict = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ScenarioError(f"unknown section [{sec}]", source, lines.get((sec, None)))
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ScenarioError(f"unknown key '{key}' in [{sec}]", source, lines.get((sec, key)))
            conv = SCHEMA[sec][key][0]
            try:
                values.setdefault(sec, {})[key] = conv(raw)
            except ValueError as e:
                raise ScenarioError(f"bad value for {sec}.{key}: {e}", source, lines.get((sec, key))) from None
    schema = values.get("scenario", {}).get("schema")
    if schema is None:
        raise ScenarioError("missing [scenario] schema", source, lines.get(("scenario", None)))
    if schema != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema {schema} (expected {SCHEMA_VERSION})", source,
                            lines.get(("scenario", "schema")))
    full = {}
    for sec, keys in SCHEMA.items():
        full[sec] = {k: values.get(sec, {}).get(k, default) for k, (_c, default) in keys.items()}
    return Scenario(full, source, base_dir or Path("."))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ScenarioError(f"cannot read: {e.strerror}", str(path)) from None
    return parse_scenario(text, str(path), path.parent)


def bundled_scenarios() -> dict[str, Path]:
    root = Path(__file__).parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.cfg"))}

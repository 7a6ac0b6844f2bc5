from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
from typing import Any, Dict, Iterable, List, Sequence, Tuple

import networkx as nx
import numpy as np
import yaml

from fpp_flows.common import ConfigError
from fpp_flows.distributions import Field, format_value
from fpp_flows.lattice import FlowProblem, endpoints


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def config_hash(config: Dict) -> str:
    return "sha256:" + hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def load_yaml(path: str) -> Dict:
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read config '{path}': {e}") from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config '{path}' must hold a mapping at the top level.")
    return data


def read_table(path: str) -> List[Tuple[str, str]]:
    """Two-column table of (cumulative probability, value); '#' starts a comment."""
    rows = []
    try:
        with open(path, "r") as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.replace(",", " ").split()
                if len(parts) != 2:
                    raise ConfigError(f"Table line '{line}' needs two columns.")
                rows.append((parts[0], parts[1]))
    except OSError as e:
        raise ConfigError(f"Cannot read table '{path}': {e}") from e
    return rows


def write_csv(path: str, fieldnames: Sequence[str], rows: Iterable[Dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_jsonl(path: str, records: Iterable[Dict]) -> None:
    with open(path, "w") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def versions() -> Dict[str, str]:
    import scipy

    from fpp_flows import __version__

    return {
        "fpp_flows": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "networkx": nx.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
    }


def write_manifest(path: str, config: Dict, seeds: Sequence[int]) -> Dict:
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seeds": list(seeds),
        "versions": versions(),
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def dump_cut(path: str, problem: FlowProblem, field: Field, cutset: Iterable) -> None:
    """Line-oriented dump of a problem and a cut for diffing across implementations."""
    cutset = set(cutset)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(f"vertices {len(problem.vertices)}\n")
        for x in sorted(problem.vertices):
            role = "source" if x in problem.sources else "sink" if x in problem.sinks else "inner"
            f.write(f"v {' '.join(map(str, x))} {role}\n")
        f.write(f"edges {len(problem.edges)}\n")
        for edge in problem.edges:
            x, y = endpoints(edge)
            flag = 1 if edge in cutset else 0
            f.write(
                f"e {' '.join(map(str, x))} {' '.join(map(str, y))} "
                f"{format_value(field.capacity(edge))} {flag}\n"
            )

"""Dataset interchange, validation, normalization and a synthetic M/M/1 generator.

Dataset files are JSON Lines, one self-contained sample per line::

    {"schema_version": 1, "id": "s000000",
     "topology": {"nodes": 5,
                  "l2_links": [{"src": 0, "dst": 1, "capacity": 1e9}, ...],
                  "l3_links": [{"src": 0, "dst": 1, "capacity": 1e9}, ...]},
     "flows": [{"src": 0, "dst": 3, "traffic_rate": 2.1e7, "packet_rate": 2950.0,
                "packet_size": 7120.0, "flow_type": "CBR",
                "path": [[0, 0], [4, 4]], "delay": 1.9e-5}, ...]}

Units: capacities and traffic rates in bits/s, packet rates in packets/s,
packet sizes in bits, delays in seconds. ``path`` lists ``[l2, l3]`` link
indices hop by hop.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import FLOW_FEATURES, L2_FEATURES, L3_FEATURES, NetworkSample, SampleError

SCHEMA_VERSION = 1
GBPS = 1e9

# value ranges of the real testbed dataset
REGIME_RANGES: dict[str, tuple[float, float]] = {
    "capacity": (1.0 * GBPS, 80.0 * GBPS),
    "traffic_rate": (8.58447072e05, 3.23802572e08),
    "packet_rate": (221.7, 43856.35),
    "packet_size": (824.0, 11552.0),
    "flow_type": (0.0, 1.0),
}
REGIME_CAPACITIES = (1.0 * GBPS, 10.0 * GBPS, 80.0 * GBPS)
REGIME_NODES = (5, 8)
REGIME_EDGES = (10, 26)
FLOW_TYPES = ("CBR", "MB")

# named random sub-streams derived from one seed
STREAM_GENERATION = 0
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_SPLIT = 3


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), *map(int, extra)])


class DatasetError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass
class FlowSpec:
    src: int
    dst: int
    traffic_rate: float
    packet_rate: float
    packet_size: float
    flow_type: str = "CBR"
    path: list[tuple[int, int]] = field(default_factory=list)
    delay: float | None = None

    def features(self) -> list[float]:
        return [self.traffic_rate, self.packet_rate, self.packet_size, float(FLOW_TYPES.index(self.flow_type))]


@dataclass
class TopologySpec:
    nodes: int
    l3_links: list[tuple[int, int, float]]  # (src, dst, capacity)
    l2_links: list[tuple[tuple[int, int], float]]  # ((a, b), capacity)

    def directed_edge_count(self) -> int:
        return len(self.l3_links)

    def undirected_edge_count(self) -> int:
        return len({tuple(sorted((s, d))) for s, d, _ in self.l3_links})


def build_sample(topology: TopologySpec, flows: list[FlowSpec], sample_id: str = "") -> NetworkSample:
    """Assemble a physical-units :class:`NetworkSample` from specs."""
    return NetworkSample(
        l2_features=np.array([[cap] for _, cap in topology.l2_links], dtype=np.float64).reshape(-1, len(L2_FEATURES)),
        l3_features=np.array([[cap] for _, _, cap in topology.l3_links], dtype=np.float64).reshape(-1, len(L3_FEATURES)),
        flow_features=np.array([f.features() for f in flows], dtype=np.float64).reshape(-1, len(FLOW_FEATURES)),
        paths=[list(f.path) for f in flows],
        targets=np.array([f.delay for f in flows], dtype=np.float64),
        sample_id=sample_id,
        topology=topology,
        flow_endpoints=[(f.src, f.dst) for f in flows],
        flow_types=[f.flow_type for f in flows],
    )


def flows_of(sample: NetworkSample) -> list[FlowSpec]:
    endpoints = sample.flow_endpoints or [(-1, -1)] * sample.num_flows
    out = []
    for f in range(sample.num_flows):
        tr, pr, ps, kind = (float(v) for v in sample.flow_features[f])
        out.append(
            FlowSpec(
                src=int(endpoints[f][0]),
                dst=int(endpoints[f][1]),
                traffic_rate=tr,
                packet_rate=pr,
                packet_size=ps,
                flow_type=FLOW_TYPES[int(round(kind))],
                path=list(sample.paths[f]),
                delay=float(sample.targets[f]),
            )
        )
    return out


# ---------------------------------------------------------------- serialization


def sample_to_record(sample: NetworkSample) -> dict:
    topo = sample.topology
    if topo is None:
        raise DatasetError(f"sample {sample.sample_id!r} has no topology to serialize")
    return {
        "schema_version": SCHEMA_VERSION,
        "id": sample.sample_id,
        "topology": {
            "nodes": topo.nodes,
            "l2_links": [{"src": a, "dst": b, "capacity": cap} for (a, b), cap in topo.l2_links],
            "l3_links": [{"src": s, "dst": d, "capacity": cap} for s, d, cap in topo.l3_links],
        },
        "flows": [
            {
                "src": f.src,
                "dst": f.dst,
                "traffic_rate": f.traffic_rate,
                "packet_rate": f.packet_rate,
                "packet_size": f.packet_size,
                "flow_type": f.flow_type,
                "path": [[a, b] for a, b in f.path],
                "delay": f.delay,
            }
            for f in flows_of(sample)
        ],
    }


def record_to_sample(rec: dict) -> NetworkSample:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema_version {rec.get('schema_version')!r}")
    t = rec["topology"]
    topo = TopologySpec(
        nodes=int(t["nodes"]),
        l3_links=[(int(x["src"]), int(x["dst"]), float(x["capacity"])) for x in t["l3_links"]],
        l2_links=[((int(x["src"]), int(x["dst"])), float(x["capacity"])) for x in t["l2_links"]],
    )
    flows = []
    for x in rec["flows"]:
        if x["flow_type"] not in FLOW_TYPES:
            raise DatasetError(f"unknown flow_type {x['flow_type']!r}")
        flows.append(
            FlowSpec(
                src=int(x["src"]),
                dst=int(x["dst"]),
                traffic_rate=float(x["traffic_rate"]),
                packet_rate=float(x["packet_rate"]),
                packet_size=float(x["packet_size"]),
                flow_type=x["flow_type"],
                path=[(int(a), int(b)) for a, b in x["path"]],
                delay=float(x["delay"]),
            )
        )
    return build_sample(topo, flows, str(rec.get("id", "")))


def save_dataset(samples: list[NetworkSample], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s), separators=(",", ":")))
            fh.write("\n")
    os.replace(tmp, path)


def load_dataset(path, strict: bool = False, edge_mode: str = "either") -> list[NetworkSample]:
    """Read and validate a JSON Lines dataset.

    Errors name the offending line. An empty file yields an empty list and a
    warning.
    """
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                sample = record_to_sample(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            try:
                validate_sample(sample, strict=strict, edge_mode=edge_mode)
            except SampleError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            samples.append(sample)
    if not samples:
        warnings.warn(f"{path}: dataset is empty", stacklevel=2)
    return samples


# ---------------------------------------------------------------- validation


def _in_range(value: float, lo: float, hi: float, rel: float = 1e-9) -> bool:
    slack = rel * max(abs(lo), abs(hi))
    return lo - slack <= value <= hi + slack


def validate_sample(sample: NetworkSample, strict: bool = False, edge_mode: str = "either") -> None:
    """Structural checks always; testbed-regime range checks when ``strict``.

    ``edge_mode`` picks how the edge-count range is read: ``"directed"``
    counts L3 links, ``"undirected"`` counts node pairs, ``"either"``
    accepts a sample that passes under one of the two.
    """
    sample.validate()
    topo = sample.topology
    if topo is not None:
        if len(topo.l2_links) != sample.num_l2 or len(topo.l3_links) != sample.num_l3:
            raise SampleError(f"sample {sample.sample_id!r}: topology link counts disagree with features")
        for s, d, _ in topo.l3_links:
            if not (0 <= s < topo.nodes and 0 <= d < topo.nodes):
                raise SampleError(f"sample {sample.sample_id!r}: L3 link {s}->{d} outside {topo.nodes} nodes")
    if sample.flow_endpoints is not None and topo is not None:
        for f, (s, d) in enumerate(sample.flow_endpoints):
            if not (0 <= s < topo.nodes and 0 <= d < topo.nodes):
                raise SampleError(f"sample {sample.sample_id!r}: flow {f} endpoints {s}->{d} outside topology")
    if (sample.flow_features[:, :3] <= 0).any():
        raise SampleError(f"sample {sample.sample_id!r}: flow rates and sizes must be positive")
    if not strict:
        return

    sid = sample.sample_id
    if topo is None:
        raise SampleError(f"sample {sid!r}: strict validation needs topology metadata")
    if not REGIME_NODES[0] <= topo.nodes <= REGIME_NODES[1]:
        raise SampleError(f"sample {sid!r}: {topo.nodes} nodes outside {REGIME_NODES}")
    lo, hi = REGIME_EDGES
    counts = {"directed": topo.directed_edge_count(), "undirected": topo.undirected_edge_count()}
    modes = ("directed", "undirected") if edge_mode == "either" else (edge_mode,)
    if not any(lo <= counts[m] <= hi for m in modes):
        raise SampleError(f"sample {sid!r}: edge count {counts} outside {REGIME_EDGES} ({edge_mode})")
    for cap in np.concatenate([sample.l2_features[:, 0], sample.l3_features[:, 0]]):
        if not any(math.isclose(cap, c, rel_tol=1e-9) for c in REGIME_CAPACITIES):
            raise SampleError(f"sample {sid!r}: capacity {cap:g} not in {REGIME_CAPACITIES}")
    for f, row in enumerate(sample.flow_features):
        for name, value in zip(FLOW_FEATURES, row):
            if not _in_range(value, *REGIME_RANGES[name]):
                raise SampleError(f"sample {sid!r}: flow {f} {name}={value:g} outside {REGIME_RANGES[name]}")
        tr, pr, ps, kind = row
        if kind == 0 and abs(tr - pr * ps) > 0.01 * tr:
            raise SampleError(f"sample {sid!r}: CBR flow {f} traffic_rate != packet_rate * packet_size")


# ---------------------------------------------------------------- normalization


@dataclass
class NormalizationSpec:
    """Min-max ranges per feature name plus a multiplicative delay scale."""

    ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(REGIME_RANGES))
    delay_scale: float = 1.0

    def __post_init__(self):
        self.ranges = {k: (float(lo), float(hi)) for k, (lo, hi) in self.ranges.items()}
        for name, (lo, hi) in self.ranges.items():
            if not hi > lo:
                raise ValueError(f"normalization range for {name} needs max > min, got ({lo}, {hi})")
        if not self.delay_scale > 0:
            raise ValueError("delay_scale must be positive")

    def with_delay_scale(self, samples: list[NetworkSample]) -> "NormalizationSpec":
        """Copy whose delay scale is the mean target delay of ``samples``."""
        targets = np.concatenate([s.targets for s in samples])
        return NormalizationSpec(dict(self.ranges), float(targets.mean()))

    def to_dict(self) -> dict:
        return {"version": 1, "ranges": {k: list(v) for k, v in self.ranges.items()}, "delay_scale": self.delay_scale}

    @classmethod
    def from_dict(cls, doc: dict) -> "NormalizationSpec":
        return cls({k: tuple(v) for k, v in doc["ranges"].items()}, float(doc["delay_scale"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizationSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def _bounds(self, names) -> tuple[np.ndarray, np.ndarray]:
        missing = [n for n in names if n not in self.ranges]
        if missing:
            raise ValueError(f"normalization spec lacks ranges for {missing}")
        lo = np.array([self.ranges[n][0] for n in names])
        hi = np.array([self.ranges[n][1] for n in names])
        return lo, hi


def _scale(x: np.ndarray, names, spec: NormalizationSpec, strict: bool, inverse: bool) -> np.ndarray:
    lo, hi = spec._bounds(names)
    if inverse:
        return x * (hi - lo) + lo
    if strict:
        slack = 1e-9 * np.maximum(np.abs(lo), np.abs(hi))
        bad = (x < lo - slack) | (x > hi + slack)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise SampleError(f"{names[c]}={x[r, c]:g} outside normalization range {spec.ranges[names[c]]}")
    return (x - lo) / (hi - lo)


def _rescaled(sample: NetworkSample, spec: NormalizationSpec, strict: bool, inverse: bool) -> NetworkSample:
    return NetworkSample(
        l2_features=_scale(sample.l2_features, L2_FEATURES, spec, strict, inverse),
        l3_features=_scale(sample.l3_features, L3_FEATURES, spec, strict, inverse),
        flow_features=_scale(sample.flow_features, FLOW_FEATURES, spec, strict, inverse),
        paths=[list(p) for p in sample.paths],
        targets=sample.targets * spec.delay_scale if inverse else sample.targets / spec.delay_scale,
        sample_id=sample.sample_id,
        topology=sample.topology,
        flow_endpoints=sample.flow_endpoints,
        flow_types=sample.flow_types,
    )


def normalize(sample: NetworkSample, spec: NormalizationSpec, strict: bool = False) -> NetworkSample:
    """Min-max features into [0, 1]; divide delays by ``spec.delay_scale``."""
    return _rescaled(sample, spec, strict, inverse=False)


def denormalize(sample: NetworkSample, spec: NormalizationSpec) -> NetworkSample:
    return _rescaled(sample, spec, False, inverse=True)


# ---------------------------------------------------------------- M/M/1 oracle


def service_rate(capacity: float, mean_packet_size: float) -> float:
    """Packets per second a link of ``capacity`` bits/s can serve."""
    return capacity / mean_packet_size


def mm1_sojourn(mu: float, lam: float) -> float:
    """Mean time in an M/M/1 system, ``1 / (mu - lambda)``."""
    if not lam < mu:
        raise ValueError(f"unstable queue: lambda={lam} >= mu={mu}")
    return 1.0 / (mu - lam)


def link_loads(topology: TopologySpec, flows: list[FlowSpec]) -> tuple[np.ndarray, np.ndarray]:
    """Per L3 link: (packet arrival rate, carried bits/s)."""
    lam = np.zeros(len(topology.l3_links))
    bits = np.zeros(len(topology.l3_links))
    for f in flows:
        for _, l3 in f.path:
            lam[l3] += f.packet_rate
            bits[l3] += f.traffic_rate
    return lam, bits


def link_delays(topology: TopologySpec, flows: list[FlowSpec]) -> np.ndarray:
    """M/M/1 sojourn time of every L3 link that carries traffic (0 elsewhere).

    The service rate uses the packet-weighted mean packet size of the link,
    i.e. carried bits/s over carried packets/s.
    """
    lam, bits = link_loads(topology, flows)
    out = np.zeros(len(topology.l3_links))
    for j, (_, _, cap) in enumerate(topology.l3_links):
        if lam[j] > 0:
            out[j] = mm1_sojourn(service_rate(cap, bits[j] / lam[j]), lam[j])
    return out


def flow_delays(topology: TopologySpec, flows: list[FlowSpec]) -> np.ndarray:
    per_link = link_delays(topology, flows)
    return np.array([sum(per_link[l3] for _, l3 in f.path) for f in flows])


# ---------------------------------------------------------------- generator


@dataclass
class GeneratorConfig:
    samples: int = 100
    nodes_min: int = REGIME_NODES[0]
    nodes_max: int = REGIME_NODES[1]
    capacities: tuple[float, ...] = REGIME_CAPACITIES
    flows_min: int = 4
    flows_max: int = 10
    rho_max: float = 0.9
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        if not 0.0 < self.rho_max < 1.0:
            raise ValueError(f"rho_max must lie in (0, 1), got {self.rho_max}")
        if self.samples < 0:
            raise ValueError("samples must be >= 0")
        if not 2 <= self.nodes_min <= self.nodes_max:
            raise ValueError(f"bad node range [{self.nodes_min}, {self.nodes_max}]")
        if not 1 <= self.flows_min <= self.flows_max:
            raise ValueError(f"bad flow range [{self.flows_min}, {self.flows_max}]")
        if not self.capacities or min(self.capacities) <= 0:
            raise ValueError("capacities must be non-empty and positive")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")


def shortest_path(adj: dict[int, list[int]], src: int, dst: int) -> list[int]:
    """BFS hop-count path; neighbours are explored in ascending id order."""
    parent = {src: src}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if u == dst:
            break
        for v in sorted(adj[u]):
            if v not in parent:
                parent[v] = u
                queue.append(v)
    if dst not in parent:
        raise GenerationError(f"no path {src}->{dst}")
    path = [dst]
    while path[-1] != src:
        path.append(parent[path[-1]])
    return path[::-1]


def _random_topology(cfg: GeneratorConfig, rng: np.random.Generator) -> TopologySpec:
    n = int(rng.integers(cfg.nodes_min, cfg.nodes_max + 1))
    max_pairs = n * (n - 1) // 2
    lo = max(n - 1, math.ceil(REGIME_EDGES[0] / 2))
    hi = min(max_pairs, REGIME_EDGES[1] // 2)
    m = int(rng.integers(min(lo, hi), hi + 1))

    order = rng.permutation(n)
    edges = set()
    for k in range(1, n):
        u, v = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(u, v), max(u, v)))
    rest = [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in edges]
    extra = rng.choice(len(rest), size=m - len(edges), replace=False) if m > len(edges) else []
    edges.update(rest[int(i)] for i in extra)

    l3, l2 = [], []
    for u, v in sorted(edges):
        cap = float(cfg.capacities[int(rng.integers(len(cfg.capacities)))])
        for s, d in ((u, v), (v, u)):
            l3.append((s, d, cap))
            l2.append(((s, d), cap))
    return TopologySpec(n, l3, l2)


def _random_flow(src: int, dst: int, rng: np.random.Generator) -> FlowSpec:
    t_lo, t_hi = REGIME_RANGES["traffic_rate"]
    p_lo, p_hi = REGIME_RANGES["packet_rate"]
    size = 8.0 * int(rng.integers(103, 1444 + 1))  # whole bytes within the packet-size range
    lo, hi = max(t_lo, p_lo * size), min(t_hi, p_hi * size)
    traffic = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    kind = FLOW_TYPES[int(rng.integers(2))]
    return FlowSpec(src, dst, traffic, traffic / size, size, kind)


def generate_sample(cfg: GeneratorConfig, rng: np.random.Generator, sample_id: str = "") -> NetworkSample:
    for _ in range(cfg.max_retries):
        topo = _random_topology(cfg, rng)
        n = topo.nodes
        adj: dict[int, list[int]] = {u: [] for u in range(n)}
        link_of = {}
        for j, (s, d, _) in enumerate(topo.l3_links):
            adj[s].append(d)
            link_of[(s, d)] = j
        pairs = [(s, d) for s in range(n) for d in range(n) if s != d]
        k = int(rng.integers(cfg.flows_min, min(cfg.flows_max, len(pairs)) + 1))
        flows = []
        for p in rng.choice(len(pairs), size=k, replace=False):
            s, d = pairs[int(p)]
            f = _random_flow(s, d, rng)
            hops = shortest_path(adj, s, d)
            # synthetic L2 links mirror L3 links one to one
            f.path = [(link_of[(a, b)], link_of[(a, b)]) for a, b in zip(hops, hops[1:])]
            flows.append(f)
        _, bits = link_loads(topo, flows)
        caps = np.array([cap for _, _, cap in topo.l3_links])
        # lambda < rho_max * mu  <=>  carried bits/s < rho_max * capacity
        if (bits < cfg.rho_max * caps).all():
            for f, w in zip(flows, flow_delays(topo, flows)):
                f.delay = float(w)
            return build_sample(topo, flows, sample_id)
    raise GenerationError(f"could not satisfy rho_max={cfg.rho_max} within {cfg.max_retries} attempts")


def generate_synthetic(cfg: GeneratorConfig) -> list[NetworkSample]:
    """Seeded samples; sample ``i`` draws from its own sub-stream."""
    return [
        generate_sample(cfg, substream(cfg.seed, STREAM_GENERATION, i), f"s{i:06d}") for i in range(cfg.samples)
    ]


# ---------------------------------------------------------------- splitting


def split_dataset(samples: list, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[list, ...]:
    """Disjoint seeded shuffle split; each part gets ``floor(frac * n)`` items, at least one."""
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError(f"fractions must be positive and sum to <= 1, got {fractions}")
    n = len(samples)
    if n < len(fractions):
        raise ValueError(f"{n} samples cannot fill {len(fractions)} splits")
    sizes = [max(1, int(math.floor(f * n + 1e-9))) for f in fractions]
    if sum(sizes) > n:
        raise ValueError(f"{n} samples cannot fill split sizes {sizes}")
    order = substream(seed, STREAM_SPLIT).permutation(n)
    parts, start = [], 0
    for size in sizes:
        parts.append([samples[int(i)] for i in order[start : start + size]])
        start += size
    return tuple(parts)

"""Scenario map files and the layouts that generate them.

A map file is a ``key=value`` header, a ``---`` separator and one text row per
grid row. Cell codes: ``W`` water, ``S`` stone source, ``T`` wood source
(tree), ``.`` empty, and a digit ``k`` marks the start cell of agent ``k``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

EMPTY, WATER, STONE_SOURCE, WOOD_SOURCE = ".", "W", "S", "T"
_HEADER_KEYS = ("name", "layout", "height", "width", "agents", "build_skill", "gather_skill")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    name: str
    layout: str
    height: int
    width: int
    build_skill: tuple[float, ...]
    gather_skill: tuple[float, ...]
    rows: tuple[str, ...]

    @property
    def n_agents(self) -> int:
        return len(self.build_skill)

    def cells(self) -> np.ndarray:
        return np.array([list(r) for r in self.rows])

    def start_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_agents, 2), dtype=np.int64)
        seen = set()
        for r, row in enumerate(self.rows):
            for c, ch in enumerate(row):
                if ch.isdigit():
                    pos[int(ch)] = (r, c)
                    seen.add(int(ch))
        if seen != set(range(self.n_agents)):
            raise ScenarioError(f"{self.name}: start cells {sorted(seen)} do not cover {self.n_agents} agents")
        return pos

    def skill_rank(self) -> np.ndarray:
        """1-based build-skill rank per agent (1 = highest skill)."""
        order = np.argsort(-np.asarray(self.build_skill), kind="stable")
        rank = np.empty(self.n_agents, dtype=np.int64)
        rank[order] = np.arange(1, self.n_agents + 1)
        return rank


def parse_scenario(text: str) -> Scenario:
    header, sep, body = text.partition("\n---\n")
    if not sep:
        raise ScenarioError("missing '---' separator between header and grid")
    fields = {}
    for line in header.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ScenarioError(f"bad header line: {line!r}")
        fields[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise ScenarioError(f"header is missing {missing}")
    rows = tuple(body.rstrip("\n").split("\n"))
    height, width = int(fields["height"]), int(fields["width"])
    if len(rows) != height or any(len(r) != width for r in rows):
        raise ScenarioError(f"grid is not {height}x{width}")
    bad = set("".join(rows)) - set(EMPTY + WATER + STONE_SOURCE + WOOD_SOURCE + "0123456789")
    if bad:
        raise ScenarioError(f"unknown cell codes {sorted(bad)}")
    build = tuple(float(x) for x in fields["build_skill"].split(","))
    gather = tuple(float(x) for x in fields["gather_skill"].split(","))
    n = int(fields["agents"])
    if len(build) != n or len(gather) != n:
        raise ScenarioError("skill lists do not match the agent count")
    scenario = Scenario(fields["name"], fields["layout"], height, width, build, gather, rows)
    scenario.start_positions()
    return scenario


def format_scenario(s: Scenario) -> str:
    lines = [
        f"name={s.name}",
        f"layout={s.layout}",
        f"height={s.height}",
        f"width={s.width}",
        f"agents={s.n_agents}",
        "build_skill=" + ",".join(repr(x) for x in s.build_skill),
        "gather_skill=" + ",".join(repr(x) for x in s.gather_skill),
        "---",
    ]
    return "\n".join(lines + list(s.rows)) + "\n"


def canonical_name(name: str) -> str:
    return re.sub(r"[,\s]+", "-", name.strip().lower())


def available_scenarios() -> list[str]:
    root = resources.files("gtb.data") / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".map"))


def load_scenario(name_or_path: str) -> Scenario:
    """Load a bundled scenario by name, or any map file by path."""
    if name_or_path.endswith(".map"):
        with open(name_or_path) as fh:
            return parse_scenario(fh.read())
    name = canonical_name(name_or_path)
    path = resources.files("gtb.data") / "scenarios" / f"{name}.map"
    if not path.is_file():
        raise ScenarioError(f"unknown scenario {name_or_path!r}; valid: {', '.join(available_scenarios())}")
    return parse_scenario(path.read_text())


# --------------------------------------------------------------------------
# Layout builders (used to generate the bundled map files)
# --------------------------------------------------------------------------


def pareto_build_skills(n: int, seed: int, shape: float = 2.0, base: float = 10.0,
                        max_multiplier: float = 3.0) -> tuple[float, ...]:
    rng = np.random.default_rng(seed)
    mult = np.minimum(1.0 + rng.pareto(shape, size=n), max_multiplier)
    return tuple(float(round(x, 2)) for x in np.sort(base * mult))


def uniform_gather_skills(n: int, seed: int, high: float = 0.5) -> tuple[float, ...]:
    rng = np.random.default_rng(seed + 1000)
    return tuple(float(round(x, 3)) for x in rng.uniform(0.0, high, size=n))


def _scatter(grid, rng, r0, r1, c0, c1, code, density):
    for r in range(r0, r1):
        for c in range(c0, c1):
            if grid[r][c] == EMPTY and rng.random() < density:
                grid[r][c] = code


def _place_agents(grid, rng, agents, r0, r1, c0, c1):
    free = [(r, c) for r in range(r0, r1) for c in range(c0, c1) if grid[r][c] == EMPTY]
    picks = rng.choice(len(free), size=len(agents), replace=False)
    for agent, p in zip(agents, picks):
        r, c = free[p]
        grid[r][c] = str(agent)


def build_open_quadrant(name: str, size: int, n_agents: int, skill_seed: int,
                        layout_seed: int = 0, density: float = 0.12) -> Scenario:
    """Four water-walled quadrants joined by passages.

    Top-left holds wood, top-right stone, bottom-left both, bottom-right
    nothing. Agents are split into build-skill quartiles: lowest in the wood
    quadrant, then stone, then both; the highest quartile starts empty.
    """
    rng = np.random.default_rng(layout_seed)
    grid = [[EMPTY] * size for _ in range(size)]
    mid = size // 2
    for i in range(size):
        grid[mid][i] = WATER
        grid[i][mid] = WATER
    gap = 1 if size < 20 else 2
    for centre in (mid // 2, mid + (size - mid) // 2):
        for k in range(gap):
            grid[mid][centre + k] = EMPTY
            grid[centre + k][mid] = EMPTY
    quads = {
        "wood": (0, mid, 0, mid),
        "stone": (0, mid, mid + 1, size),
        "both": (mid + 1, size, 0, mid),
        "empty": (mid + 1, size, mid + 1, size),
    }
    _scatter(grid, rng, *quads["wood"], WOOD_SOURCE, density)
    _scatter(grid, rng, *quads["stone"], STONE_SOURCE, density)
    r0, r1, c0, c1 = quads["both"]
    _scatter(grid, rng, r0, r1, c0, c1, STONE_SOURCE, density / 2)
    _scatter(grid, rng, r0, r1, c0, c1, WOOD_SOURCE, density / 2)

    build = pareto_build_skills(n_agents, skill_seed)
    gather = uniform_gather_skills(n_agents, skill_seed)
    for agents, quad in zip(open_quadrant_groups(build), ("wood", "stone", "both", "empty")):
        _place_agents(grid, rng, agents, *quads[quad])
    rows = tuple("".join(r) for r in grid)
    return Scenario(name, "open-quadrant", size, size, build, gather, rows)


def open_quadrant_groups(build_skill) -> list[list[int]]:
    """Agent indices per build-skill quartile, lowest quartile first."""
    order = np.argsort(np.asarray(build_skill), kind="stable")
    return [sorted(int(a) for a in part) for part in np.array_split(order, 4)]


def build_split_world(name: str, size: int, top_ranks: tuple[int, ...], skill_seed: int,
                      n_agents: int = 10, layout_seed: int = 0, density: float = 0.1) -> Scenario:
    """Two halves separated by a water band.

    The top half has stone and wood; the bottom only stone. ``top_ranks``
    lists the 1-based build-skill ranks that start in the top half.
    """
    rng = np.random.default_rng(layout_seed)
    grid = [[EMPTY] * size for _ in range(size)]
    mid = size // 2
    for i in range(size):
        grid[mid - 1][i] = WATER
        grid[mid][i] = WATER
    _scatter(grid, rng, 0, mid - 1, 0, size, STONE_SOURCE, density / 2)
    _scatter(grid, rng, 0, mid - 1, 0, size, WOOD_SOURCE, density / 2)
    _scatter(grid, rng, mid + 1, size, 0, size, STONE_SOURCE, density / 2)

    build = pareto_build_skills(n_agents, skill_seed)
    gather = uniform_gather_skills(n_agents, skill_seed)
    order = np.argsort(-np.asarray(build), kind="stable")
    top = sorted(int(order[r - 1]) for r in top_ranks)
    bottom = sorted(set(range(n_agents)) - set(top))
    _place_agents(grid, rng, top, 0, mid - 1, 0, size)
    _place_agents(grid, rng, bottom, mid + 1, size, 0, size)
    rows = tuple("".join(r) for r in grid)
    return Scenario(name, "split-world", size, size, build, gather, rows)


def bundled_builders() -> dict:
    """Generators for every bundled map, keyed by scenario name."""
    builders = {
        "open-quadrant-4": lambda: build_open_quadrant("open-quadrant-4", 25, 4, skill_seed=1),
        "open-quadrant-4-desk": lambda: build_open_quadrant("open-quadrant-4-desk", 15, 4, skill_seed=1),
        "open-quadrant-10": lambda: build_open_quadrant("open-quadrant-10", 40, 10, skill_seed=3),
        "toy-2": lambda: build_open_quadrant("toy-2", 7, 2, skill_seed=1, density=0.3),
    }
    for ranks in ((1, 2, 3), (8, 9, 10), (5, 6), (1, 2, 3, 4, 5)):
        name = "split-world-" + "-".join(str(r) for r in ranks)
        builders[name] = (lambda n=name, r=ranks: build_split_world(n, 40, r, skill_seed=3))
    return builders


def write_bundled(directory) -> None:
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, build in bundled_builders().items():
        (out / f"{name}.map").write_text(format_scenario(build()))


if __name__ == "__main__":
    import sys

    write_bundled(sys.argv[1] if len(sys.argv) > 1 else resources.files("gtb.data") / "scenarios")

import numpy as np

# Named streams of a search run; order fixes which child seed each name gets.
SEARCH_STREAMS = ["agent", "warmup", "reward", "cache"]


def spawn_generators(seed: int, names: list[str]) -> dict[str, np.random.Generator]:
    """Independent named streams derived from one run seed; the order of `names` matters."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}

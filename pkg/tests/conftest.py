import numpy as np
import pytest

from hiertool import data_path
from hiertool.embeddings import load_vectors
from hiertool.hierarchy import Hierarchy, load_hierarchy, loads_hierarchy


@pytest.fixture(scope="session")
def toy_h():
    return load_hierarchy(data_path("toy_birds.tsv"))


@pytest.fixture(scope="session")
def toy21_h():
    return load_hierarchy(data_path("toy21.tsv"))


@pytest.fixture(scope="session")
def cub_h():
    return load_hierarchy(data_path("cub_style.tsv"))


@pytest.fixture(scope="session")
def vectors():
    return load_vectors(data_path("vectors_50d.txt"))


@pytest.fixture(scope="session")
def abde_h():
    """Worked-example tree: A -> B -> {D, E}, A -> C -> F."""
    return loads_hierarchy("A\t-\nB\tA\nC\tA\nD\tB\nE\tB\nF\tC\n")


def random_tree(rng: np.random.Generator, depth: int, max_children: int = 3) -> Hierarchy:
    """Balanced random tree with unique names ``n<i>``."""
    triples = [(0, "root", None)]
    frontier = [0]
    next_id = 1
    for _ in range(depth):
        new = []
        for parent in frontier:
            for _ in range(int(rng.integers(1, max_children + 1))):
                triples.append((next_id, f"n{next_id}", parent))
                new.append(next_id)
                next_id += 1
        frontier = new
    return Hierarchy(triples)


# -- a small trained model shared by the slow behavioural tests ------------------------

LEVEL_MODEL = dict(image_size=32, patch_size=8, width=32, encoder_blocks=2, decoder_blocks=1, heads=4)


@pytest.fixture(scope="session")
def trained_level_model(toy_h, vectors):
    """Model trained on a 400-record severity-annotated build, with timing.

    Returns a dict with the model, label index, training records and the
    wall-clock seconds spent on data synthesis plus training.
    """
    import time

    from hiertool import dataset_builder as db
    from hiertool import model as mdl
    from hiertool.embeddings import build_query_matrix
    from hiertool.synthetic import make_sources

    start = time.perf_counter()
    sources = make_sources(toy_h, 100, size=32, seed=1)
    build = db.build_dataset(sources, db.SeverityAnnotator(toy_h), toy_h, db.BuildConfig(seed=3))
    samples = [mdl.TrainSample(r.image, r.category_path, r.level_label) for r in build.records]
    cfg = mdl.ModelConfig.for_hierarchy(toy_h, vectors.dim, **LEVEL_MODEL)
    model = mdl.HierarchyNet(cfg, build_query_matrix(vectors, toy_h), seed=0)
    labels = mdl.LabelIndex(toy_h)
    result = mdl.train(samples, model, labels, mdl.TrainSchedule(lr=0.05, batch=16, epochs=40, cosine=True), seed=0)
    return {
        "model": model,
        "labels": labels,
        "records": build.records,
        "losses": result.losses,
        "seconds": time.perf_counter() - start,
    }


def paired_levels(model, labels, h, n_per_leaf=15, seed=99):
    """Predicted levels for lightly vs heavily distorted copies of fresh sources."""
    from hiertool import distortion as dist
    from hiertool import model as mdl
    from hiertool.synthetic import make_sources

    light = dist.DistortionSpec((dist.DOWNSAMPLE,), lambda_rate=0.7)
    heavy = dist.DistortionSpec(dist.TYPES, sigma=0.2, eta=14, blur_angle=45.0, lambda_rate=0.4, delta=0.06)
    rng = np.random.default_rng(5)
    pairs = []
    for src in make_sources(h, n_per_leaf, size=32, seed=seed, prefix="test"):
        a = mdl.infer(dist.apply(src.image, light, src.region, rng), model, labels).level
        b = mdl.infer(dist.apply(src.image, heavy, src.region, rng), model, labels).level
        pairs.append((a, b))
    return pairs


# -- acceptance report ---------------------------------------------------------------

ACCEPTANCE: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)

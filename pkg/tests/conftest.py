import pytest

from ccgan.core import ExperimentConfig
from ccgan.data import SyntheticSpec, generate_synthetic, load_manifest
from ccgan.training import run_training

ACCEPTANCE_KEY = pytest.StashKey[dict]()

# Desk-scale reference experiment: 3 classes, 64 px, 20 patches per class and
# domain, fixture seed 7; held-out patches come from a disjoint seed.
REFERENCE_CONFIG = ExperimentConfig(patch_size=64, num_classes=3, total_iterations=500, checkpoint_every=500, seed=7)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """3 classes, 32 px, 6 patches per class and domain."""
    root = tmp_path_factory.mktemp("small")
    generate_synthetic(SyntheticSpec(num_classes=3, patch_size=32, per_class_count=6, seed=3), root)
    return root / "manifest.tsv"


@pytest.fixture(scope="session")
def reference_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    train = generate_synthetic(SyntheticSpec(num_classes=3, patch_size=64, per_class_count=20, seed=7), root / "train")
    held = generate_synthetic(SyntheticSpec(num_classes=3, patch_size=64, per_class_count=30, seed=1007), root / "held")
    return train, held


@pytest.fixture(scope="session")
def reference_runs(tmp_path_factory, reference_data):
    """Lazily trained 500-step runs keyed by 'conditioned' / 'unconditioned'."""
    train, _ = reference_data
    cache = {}

    def get(kind: str):
        if kind not in cache:
            cfg = REFERENCE_CONFIG.replace(condition_generators=kind == "conditioned")
            cache[kind] = run_training(cfg, train, tmp_path_factory.mktemp(kind))
        return cache[kind]

    return get


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")

"""A miniature four-dataset world for fast pipeline tests."""
import pytest

from contseg.css import ContinualPlan
from contseg.phantom import ClassRegistry, OrganDef, PhantomSpec, generate_dataset

TINY_ANATOMY = (
    OrganDef("a", 1, 0.0, 3.0, 0.6, (1.6, 2.0), (1.0, 1.4)),
    OrganDef("b", 2, 90.0, 3.0, 1.0, (1.6, 2.0), (1.0, 1.4)),
    OrganDef("c", 3, 180.0, 3.0, 1.4, (1.6, 2.0), (1.0, 1.4)),
    OrganDef("d", 4, 270.0, 3.0, 1.8, (1.6, 2.0), (1.0, 1.4)),
)
TINY_SUBSETS = {"w": (1, 2, 3), "x": (2, 4), "y": (1, 4), "z": (2,)}
TINY_WIDTHS = (4, 8, 8)


def tiny_spec(name, seed, anomaly_rate=0.0, n=12):
    return PhantomSpec(name=name, labeled=TINY_SUBSETS[name], n_samples=n, seed=seed, shape=(16, 16, 16),
                       body_radius=7.0, anomaly_rate=anomaly_rate, anomaly_radius_range=(1.0, 1.3),
                       anatomy=TINY_ANATOMY)


def tiny_plan(**kw):
    defaults = dict(order=("w", "x", "y", "z"), base_epochs=3, step_epochs=2, nas_epochs=2, distill_epochs=1,
                    finetune_epochs=1, widths=TINY_WIDTHS, seed=0)
    defaults.update(kw)
    return ContinualPlan(**defaults)


@pytest.fixture(scope="session")
def tiny_registry():
    return ClassRegistry(["background", "a", "b", "c", "d"], dict(TINY_SUBSETS))


@pytest.fixture(scope="session")
def tiny_datasets(tiny_registry):
    rates = {"w": 0.5, "x": 0.0, "y": 0.0, "z": 0.75}
    return {name: generate_dataset(tiny_spec(name, 10 + i, rates[name]), tiny_registry)
            for i, name in enumerate(TINY_SUBSETS)}

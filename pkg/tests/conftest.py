import numpy as np
import pytest

from voltkernel import feeder, scenario


@pytest.fixture(scope="session")
def feeder13():
    return feeder.load_feeder(feeder.bundled_feeder_path())


@pytest.fixture(scope="session")
def sens13(feeder13):
    return feeder.build_sensitivities(feeder13)


@pytest.fixture(scope="session")
def profiles480(feeder13):
    """8-hour synthetic day at 75% penetration, the acceptance conditions."""
    cfg = scenario.GenConfig(horizon_min=480, penetration=0.75, seed=7,
                             solar_scale=2.0)
    return scenario.synthesize_profiles(feeder13, cfg)


@pytest.fixture(scope="session")
def midday_scen(feeder13, sens13, profiles480):
    """One 30-minute training window around local noon."""
    return scenario.build_scenarios(profiles480, range(225, 255), sens13,
                                    f=feeder13)


@pytest.fixture(scope="session")
def feeder2():
    """Smallest valid feeder: substation plus one load bus."""
    return feeder.FeederModel(p_nom=[0.0, 0.1], q_nom=[0.0, 0.04],
                              lines=[(0, 1, 0.01, 0.02)])


def tiny_scenario_set(x_entry, y_vals, q_bar_vals, z_cols=None):
    """Hand-built single-bus ScenarioSet for oracle-level trainer tests.

    x_entry is unused here (the caller builds matching Sensitivities);
    kept for call-site clarity.
    """
    y = np.asarray(y_vals, dtype=float).reshape(-1, 1)
    S = y.shape[0]
    q_bar = np.asarray(q_bar_vals, dtype=float).reshape(-1, 1)
    if z_cols is None:
        z_cols = np.linspace(-1.0, 1.0, S).reshape(1, S)
    z = np.asarray(z_cols, dtype=float).reshape(1, -1, S)
    return scenario.ScenarioSet(
        scenario_ids=np.arange(S), y=y, q_bar=q_bar, z=z,
        mean=np.zeros(z.shape[:2]), std=np.ones(z.shape[:2]),
        layout=scenario.InputLayout(), inverter_buses=(1,),
        s_bar=np.array([float(np.max(q_bar))]), p_g=np.zeros((S, 1)),
        normalized=False)

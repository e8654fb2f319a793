"""Smoke test for the Python bindings: `pip install --no-build-isolation crates/py`."""

import math

import gchoreo


def test_synth_shapes():
    scene = gchoreo.synth("wave", 2, 32, seed=1)
    assert len(scene["motions"]) == 2
    assert len(scene["motions"][0]) == 32
    assert len(scene["motions"][0][0]) == 72
    assert len(scene["features"]) == 32
    assert scene["fps"] == 30.0


def test_metrics():
    a = gchoreo.synth("static", 2, 20, seed=0)["motions"]
    assert 0.0 <= gchoreo.tif(a) <= 1.0
    assert gchoreo.mmc_from_beats([0.5, 1.0], [0.5, 1.0]) == 1.0
    shifted = gchoreo.mmc_from_beats([0.6], [0.5], sigma=0.1)
    assert abs(shifted - math.exp(-0.5)) < 1e-9
    assert gchoreo.spatial_encoding([0, 0, 5], [0, 0, 5]) == 1.0
    walks = gchoreo.synth("circle", 3, 24, seed=2)["motions"]
    assert gchoreo.fid_kinetic(walks, walks) < 1e-8


def test_local_fit_recovers_pose():
    err, trace = gchoreo.fit_local_synthetic("wave", frames=20)
    assert err < 0.05
    assert trace[-1] <= trace[0]


def test_gradcheck_plane():
    rows = gchoreo.gradcheck("plane", seed=0)
    assert rows and all(passed for *_, passed in rows)


def test_errors_surface_as_value_error():
    try:
        gchoreo.synth("moonwalk", 1, 10)
    except ValueError as e:
        assert "moonwalk" in str(e)
    else:
        raise AssertionError("bad pattern accepted")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
            print(f"ok {name}")

import json
import numpy as np
import pytest
from guided_wost.scene import (
    Kind,
    Constant,
    Linear,
    Raster,
    Zero,
    closed_loops,
    load_scene,
    load_scene_file,
    dump_scene,
    eval_dirichlet,
    eval_neumann,
    eval_source,
)
from guided_wost.errors import SceneError
from guided_wost.presets import get_preset
from conftest import square_doc


def test_minimal_square(dirichlet_square):
    scene = dirichlet_square
    assert len(scene.segments) == 4
    assert all(s.kind == Kind.DIRICHLET for s in scene.segments)
    assert scene.epsilon_shell == 1e-4
    assert isinstance(scene.source, Zero)
    assert not scene.has_source


def test_mixed_kinds(square_scene):
    assert list(square_scene.segment_ids(Kind.NEUMANN)) == [0, 2]
    assert list(square_scene.segment_ids("dirichlet")) == [1, 3]
    assert not square_scene.has_neumann_flux


def test_default_epsilon_shell():
    doc = square_doc()
    del doc["epsilon_shell"]
    scene = load_scene(doc)
    assert scene.epsilon_shell == pytest.approx(1e-3 * np.sqrt(2))


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d["segments"][2].update(value="missing"), "segments[2].value"),
        (lambda d: d["segments"][1].update(kind="robin"), "segments[1].kind"),
        (lambda d: d["segments"][0].update(b=[0, 0]), "segments[0]"),
        (lambda d: d["segments"][3].update(a=[0, 2]), "segments[3].a"),
        (lambda d: d.update(epsilon_shell=0), "epsilon_shell"),
        (lambda d: d.update(segments=[]), "segments"),
        (lambda d: d.update(bbox={"min": [0, 0]}), "bbox"),
        (lambda d: d["values"].update(bad={"type": "spline"}), "values.bad.type"),
    ],
)
def test_validation_errors(mutate, path):
    doc = square_doc()
    mutate(doc)
    with pytest.raises(SceneError) as e:
        load_scene(doc)
    assert e.value.path == path
    assert path in str(e.value)


def test_parse_error_has_line():
    with pytest.raises(SceneError) as e:
        load_scene('{\n  "bbox": {\n    "min": [0, 0],,\n  }\n}')
    assert e.value.line == 3
    assert str(e.value).startswith("line 3")


def test_roulette_requires_dirichlet():
    doc = square_doc(left="neumann", right="neumann")
    load_scene(doc)
    with pytest.raises(SceneError):
        load_scene(doc, roulette=False)


def test_eval_dirichlet_values():
    doc = square_doc(edges="dirichlet")
    doc["values"]["c"] = {"type": "constant", "value": 2.5}
    doc["values"]["lin"] = {"type": "linear", "c0": 0, "cx": 1, "cy": -1}
    doc["segments"][0]["value"] = "c"
    doc["segments"][1]["value"] = "lin"
    scene = load_scene(doc)
    assert eval_dirichlet(scene, [0.4, 0.0], 0) == 2.5
    assert eval_dirichlet(scene, [0.3, 0.2], 1) == pytest.approx(0.1)
    p = np.array([[0.3, 0.2], [0.5, 0.0]])
    assert np.allclose(eval_dirichlet(scene, p, np.array([1, 0])), [0.1, 2.5])


def test_eval_neumann_values(square_scene):
    assert eval_neumann(square_scene, [0.5, 0.0], 0) == 0.0
    assert Linear(0, 0, 2)(np.array([1.0, 0.5])) == pytest.approx(1.0)
    assert Constant(1.0)(np.array([0.2, 0.9])) == 1.0


def test_wrong_kind(square_scene):
    with pytest.raises(SceneError):
        eval_dirichlet(square_scene, [0.5, 0.0], 0)
    with pytest.raises(SceneError):
        eval_neumann(square_scene, [1.0, 0.5], 1)


def test_raster_cell_centers():
    values = np.arange(12, dtype=float).reshape(3, 4)
    raster = Raster(4, 3, ((0.0, 0.0), (2.0, 3.0)), values)
    for j in range(3):
        for i in range(4):
            assert raster(np.array(raster.cell_center(i, j))) == values[j, i]


def test_eval_source():
    doc = square_doc()
    doc["source"] = {"type": "constant", "value": 4.0}
    scene = load_scene(doc)
    assert eval_source(scene, [0.5, 0.5]) == 4.0
    assert eval_source(scene, [1.5, 0.5]) == 0.0


def test_raster_source_outside_is_zero():
    doc = square_doc()
    doc["source"] = {
        "type": "raster",
        "width": 2,
        "height": 1,
        "bbox": {"min": [0, 0], "max": [0.5, 0.5]},
        "values": [1.0, 3.0],
    }
    scene = load_scene(doc)
    assert eval_source(scene, [0.1, 0.1]) == 1.0
    assert eval_source(scene, [0.4, 0.1]) == 3.0
    assert eval_source(scene, [0.8, 0.8]) == 0.0


def test_zero_source_everywhere(square_scene, rng):
    p = rng.uniform(-1, 2, size=(10**6, 2))
    out = eval_source(square_scene, p)
    assert out.shape == (10**6,)
    assert not np.any(out)


def test_eval_source_is_pure():
    doc = square_doc()
    doc["source"] = {"type": "quadratic", "cxx": 1.0, "cxy": 0.3}
    scene = load_scene(doc)
    p = np.random.default_rng(0).random((1000, 2))
    assert np.array_equal(eval_source(scene, p), eval_source(scene, p))


def test_round_trip(tmp_path):
    doc = square_doc()
    doc["values"]["r"] = {
        "type": "raster",
        "width": 2,
        "height": 2,
        "bbox": {"min": [0, 0], "max": [1, 1]},
        "values": [0.1, 0.2, 0.3, 0.4],
    }
    doc["segments"][1]["value"] = "r"
    doc["source"] = {"type": "linear", "c0": 1.5, "cx": -2.0}
    scene = load_scene(json.dumps(doc))
    filename = tmp_path / "scene.json"
    filename.write_text(dump_scene(scene))
    again = load_scene_file(str(filename))
    assert again == scene
    assert np.array_equal(again.values["r"].values, scene.values["r"].values)
    assert dump_scene(again) == dump_scene(scene)


def test_closed_loops(square_scene):
    assert np.all(square_scene.loop_labels == square_scene.loop_labels[0])
    assert square_scene.loop_labels[0] >= 0
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert list(closed_loops(a, b)) == [-1, -1]
    assert closed_loops(np.zeros((0, 2)), np.zeros((0, 2))).size == 0


def test_open_curves_are_not_loops():
    labels = get_preset("fille").scene().loop_labels
    assert np.all(labels[:4 + 24 + 24] >= 0)
    assert len(np.unique(labels[:4 + 24 + 24])) == 3
    assert np.all(labels[4 + 24 + 24:] == -1)


def test_inside_disk(harmonic_disk):
    p = np.array([[0.0, 0.0], [0.75, 0.25], [0.75, 0.75], [-0.9, -0.9], [2.0, 0.0]])
    assert list(harmonic_disk.inside(p)) == [True, True, False, False, False]
    assert harmonic_disk.inside(np.zeros((3, 4, 2))).shape == (3, 4)


def test_inside_with_nested_loops():
    scene = get_preset("fille").scene()
    p = np.array([[0.35, 0.6], [0.5, 0.5], [0.5, 0.3], [0.05, 0.95], [1.2, 0.5]])
    assert list(scene.inside(p)) == [True, True, True, True, False]


def test_inside_without_loops():
    scene = load_scene({
        "bbox": {"min": [0, 0], "max": [1, 1]},
        "values": {"one": {"type": "constant", "value": 1.0}},
        "segments": [{"a": [0, 0], "b": [0, 1], "kind": "dirichlet", "value": "one"}],
    })
    assert np.all(scene.loop_labels == -1)
    assert list(scene.inside([[0.5, 0.5], [0.99, 0.01], [1.5, 0.5]])) == [True, True, False]

import json

import pytest

from tacgen import cli, data


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out.strip(), err.strip()


def test_help_and_usage_errors(capsys):
    assert run(capsys, "--help")[0] == 0
    assert run(capsys, "bogus")[0] == cli.EXIT_USAGE
    assert run(capsys, "train-baseline", "--profile", "smoke")[0] == cli.EXIT_USAGE


@pytest.mark.parametrize("argv, key", [
    (["--set", "stage1.steps=abc"], "stage1.steps"),
    (["--set", "stage1.steps=null"], "stage1.steps"),
    (["--set", "stage1.nope=1"], "stage1.nope"),
    (["--set", "noequals"], "noequals"),
    (["--config", "/nonexistent.json"], "--config"),
])
def test_config_errors_name_the_key(capsys, tmp_path, argv, key):
    code, _, err = run(capsys, "synth-data", "--profile", "smoke", "--run-dir", str(tmp_path), *argv)
    assert code == cli.EXIT_CONFIG
    line = json.loads(err.splitlines()[-1])
    assert line["error"] == "config" and line["key"] == key


def test_config_file_merge_and_unknown_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"stage1": {"steps": 7}}))
    cfg = cli.resolve_config("smoke", str(p), ["seed=4"], None)
    assert cfg["stage1"]["steps"] == 7 and cfg["stage1"]["batch"] == 8 and cfg["seed"] == 4
    p.write_text(json.dumps({"stage9": {}}))
    with pytest.raises(cli.ConfigError) as e:
        cli.resolve_config("smoke", str(p), [], None)
    assert e.value.key == "stage9"
    assert cli.resolve_config("smoke", None, [], 11)["seed"] == 11


def test_runtime_error_is_one_json_line(capsys, tmp_path):
    code, _, err = run(capsys, "eval-estimator", "--profile", "smoke", "--run-dir", str(tmp_path),
                       "--weights", str(tmp_path / "none.pt"), "--data", str(tmp_path / "none.json"))
    assert code == cli.EXIT_RUNTIME
    line = json.loads(err.splitlines()[-1])
    assert line["error"] == "runtime" and line["stage"] == "eval-estimator"


def test_end_to_end_smoke_workflow(capsys, tmp_path):
    common = ["--profile", "smoke", "--cache", str(tmp_path / "cache")]
    code, manifest, _ = run(capsys, "synth-data", *common, "--run-dir", str(tmp_path / "d"))
    assert code == 0
    rd = tmp_path / "d"
    assert json.loads((rd / "config.json").read_text())["seed"] == 0
    assert (rd / "seed.txt").read_text().strip() == "0" and (rd / "git.txt").exists()
    man = data.load_manifest(manifest)

    code, codec, _ = run(capsys, "train-codec", *common, "--run-dir", str(tmp_path / "c"), "--data", manifest)
    assert code == 0
    code, s1, _ = run(capsys, "train-stage1", *common, "--run-dir", str(tmp_path / "s1"), "--data", manifest,
                      "--codec", codec)
    assert code == 0
    code, s2, _ = run(capsys, "train-stage2", *common, "--run-dir", str(tmp_path / "s2"), "--data", manifest,
                      "--codec", codec, "--stage1", s1)
    assert code == 0
    for kind in ("hybrid", "separate"):
        code, weights, _ = run(capsys, "train-baseline", *common, "--kind", kind, "--run-dir",
                               str(tmp_path / kind), "--data", manifest, "--codec", codec)
        assert code == 0 and (tmp_path / kind / "loss.csv").exists()

    ref = man.samples[0]
    code, img, _ = run(capsys, "generate", *common, "--run-dir", str(tmp_path / "g"), "--ref",
                       str(man.resolve(ref.image)), "--background", str(man.resolve(ref.background)),
                       "--mask", str(man.resolve(ref.mask)), "--force-initial", str(ref.force.fz),
                       "--force-target", "0.1,0,7", "--steps", "3", "--codec", codec, "--stage1", s1, "--stage2", s2)
    assert code == 0 and data.load_image(img).shape == (64, 64, 3)

    code, aug, _ = run(capsys, "augment", *common, "--run-dir", str(tmp_path / "a"), "--data", manifest,
                       "--ref-id", ref.id, "--positions", "3", "--forces", "5", "6", "--steps", "2",
                       "--codec", codec, "--stage1", s1, "--stage2", s2)
    assert code == 0
    generated = data.load_manifest(aug)
    assert len(generated) == 6 and all(r.provenance == "generated" for r in generated.samples)

    code, w, _ = run(capsys, "train-estimator", *common, "--run-dir", str(tmp_path / "e"), "--task", "pose",
                     "--data", manifest, aug, "--set", "pose_est.steps=3")
    assert code == 0
    code, metrics_csv, _ = run(capsys, "eval-estimator", *common, "--run-dir", str(tmp_path / "v"),
                               "--weights", w, "--data", manifest)
    assert code == 0
    assert open(metrics_csv).readline().strip() == "task,n,centre_px,angle_deg"

"""[SECONDARY] acceptance: the TypeScript reference plugin in stub mode.

Skipped when refplugin/dist has not been built (`npm run build` in refplugin/);
the [PRIMARY] suite never needs it.
"""

import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from selfdistill.formats import save_manifest
from selfdistill.sim import SimWorld, generate_world

from .plugin_conformance import run_session_conformance

REFPLUGIN = Path(__file__).resolve().parent.parent / "refplugin" / "dist" / "plugin.js"

pytestmark = pytest.mark.skipif(
    not REFPLUGIN.exists() or shutil.which("node") is None,
    reason="refplugin not built (run `npm run build` in refplugin/)",
)


def node_cmd(state_dir):
    return ["node", str(REFPLUGIN), "--model", "stub", "--state-dir", str(state_dir)]


def test_reference_plugin_passes_the_sim_plugins_conformance_suite(tmp_path):
    run_session_conformance(node_cmd(tmp_path / "state"), tmp_path)
    print("\nACCEPTANCE PASS: secondary plugin conformance (same suite as sim-detector)")


def test_reference_plugin_stub_inference_is_deterministic(tmp_path):
    from selfdistill.protocol import PluginSession

    manifest, _ = generate_world(SimWorld(seed=901, n_images=12))
    manifest_path = tmp_path / "m.json"
    save_manifest(manifest, manifest_path)
    with PluginSession.open(node_cmd(tmp_path / "state")) as session:
        one = session.infer(str(manifest_path), str(tmp_path / "one.json"), seed=1)
        two = session.infer(str(manifest_path), str(tmp_path / "two.json"), seed=2)
    assert (tmp_path / "one.json").read_bytes() == (tmp_path / "two.json").read_bytes()
    assert len(one) == len(two) == len(manifest)


def test_two_iteration_selftrain_against_reference_plugin_exits_zero(tmp_path):
    unlabeled, _ = generate_world(SimWorld(seed=902, n_images=25))
    save_manifest(unlabeled, tmp_path / "unlabeled.json")
    proc = subprocess.run(
        [
            sys.executable, "-m", "selfdistill", "selftrain",
            "--plugin", " ".join(node_cmd(tmp_path / "state")),
            "--unlabeled", str(tmp_path / "unlabeled.json"),
            "--workdir", str(tmp_path / "run"),
            "--iterations", "2", "--batches", "100", "--json",
        ],
        capture_output=True,
        text=True,
        timeout=180,
    )
    assert proc.returncode == 0, proc.stderr
    import json

    doc = json.loads(proc.stdout)
    assert doc["status"] == "completed"
    assert [r["index"] for r in doc["records"]] == [1, 2]
    assert [r["checkpoint_id"] for r in doc["records"]] == ["stub-1", "stub-2"]
    print("\nACCEPTANCE PASS: secondary 2-iteration selftrain against reference plugin (exit 0)")

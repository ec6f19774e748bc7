import json
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings

from photonics.models import resolve_preset
from photonics.services.reporting import MANIFEST_NAME, file_digest


def preset_data(name):
    return json.loads(resolve_preset(name).read_text(encoding="utf-8"))


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.tmp = Path(tmp.name)

    def run_command(self, name, config, out="out", **options):
        stdout = StringIO()
        call_command(name, config=str(config), out=str(self.tmp / out), stdout=stdout, stderr=StringIO(), **options)
        return stdout.getvalue()

    def write_config(self, data, name="config.json"):
        path = self.tmp / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path

    def manifest(self, out="out"):
        return json.loads((self.tmp / out / MANIFEST_NAME).read_text(encoding="utf-8"))

    def assertManifestVerifies(self, out="out"):
        manifest = self.manifest(out)
        self.assertTrue(manifest["outputs"])
        for item in manifest["outputs"]:
            self.assertEqual(file_digest(self.tmp / out / item["file"]), item["sha256"], item["file"])
        return manifest

    def assertExitCode(self, code, name, config, **options):
        with self.assertRaises(CommandError) as ctx:
            self.run_command(name, config, **options)
        self.assertEqual(ctx.exception.returncode, code, str(ctx.exception))
        return ctx.exception


class TableCommandTests(CommandTestCase):
    def test_rows_are_emitted_verbatim(self):
        output = self.run_command("table", "paper")
        self.assertIn("Quantum dots", output)
        csv_text = (self.tmp / "out" / "table.csv").read_bytes().decode("utf-8")
        self.assertEqual(csv_text.split("\r\n")[1:6], [
            "Filtered SPDC,0.08,10,13,3.9*10^5,",
            "4-wave-mixing,0.025,200,14,2*10^4,a",
            "Cavity SPDC,0.012,0.02,14,7.6*10^4,",
            "Atomic ensemble,0.02,0.01,35,2.3*10^6,b",
            'Quantum dots,N.A.,620,8,<1,"b,c"',
        ])
        manifest = self.assertManifestVerifies()
        self.assertEqual(manifest["command"], "table")
        self.assertEqual(sorted(o["file"] for o in manifest["outputs"]), ["table.csv", "table.json", "table.txt"])

    def test_missing_table_section(self):
        error = self.assertExitCode(2, "table", "ideal")
        self.assertIn("table.entries", str(error))


class RadiometryCommandTests(CommandTestCase):
    def test_report_files(self):
        output = self.run_command("radiometry", "paper")
        self.assertIn("files written", output)
        report = json.loads((self.tmp / "out" / "radiometry.json").read_text(encoding="utf-8"))
        self.assertEqual(report["config_hash"], self.manifest()["config_hash"])
        self.assertAlmostEqual(report["report"]["coherence_time_ps"], 357.2, delta=2.0)
        self.assertTrue((self.tmp / "out" / "radiometry.txt").exists())
        self.assertManifestVerifies()

    def test_filter_wider_than_band(self):
        data = preset_data("paper")
        data["radiometry"].pop("filter")
        data["radiometry"]["filter_fwhm_pm"] = 1e6
        self.assertExitCode(2, "radiometry", self.write_config(data))


class CoincidenceCommandTests(CommandTestCase):
    def test_same_seed_gives_identical_files(self):
        self.run_command("coincidence", "ideal", out="a", threads=1)
        self.run_command("coincidence", "ideal", out="b", threads=3)
        for name in ("coincidence_coherence.csv", "coincidence_summary.json"):
            self.assertEqual((self.tmp / "a" / name).read_bytes(), (self.tmp / "b" / name).read_bytes(), name)
        self.assertManifestVerifies("a")
        self.assertEqual(self.manifest("a")["config_hash"], self.manifest("b")["config_hash"])

    def test_seed_override(self):
        self.run_command("coincidence", "ideal", out="a")
        self.run_command("coincidence", "ideal", out="b", seed=7)
        self.assertEqual(self.manifest("b")["seed"], 7)
        self.assertNotEqual(self.manifest("a")["config_hash"], self.manifest("b")["config_hash"])
        self.assertNotEqual(
            (self.tmp / "a" / "coincidence_coherence.csv").read_bytes(),
            (self.tmp / "b" / "coincidence_coherence.csv").read_bytes(),
        )

    def test_negative_seed(self):
        self.assertExitCode(2, "coincidence", "ideal", seed=-1)

    @override_settings(PAIRSIM_CONFIRM_EVENTS=10.0)
    def test_large_runs_need_confirmation(self):
        error = self.assertExitCode(2, "coincidence", "ideal")
        self.assertIn("--yes", str(error))
        self.assertFalse((self.tmp / "out").exists())
        self.run_command("coincidence", "ideal", yes=True)
        self.assertManifestVerifies()

    def test_no_peak_is_a_statistics_error(self):
        data = preset_data("ideal")
        for name in ("perfect_a", "perfect_b"):
            data["detectors"][name]["efficiency"] = 0.0
        self.assertExitCode(3, "coincidence", self.write_config(data))

    def test_unknown_key(self):
        data = preset_data("ideal")
        data["coincidence"]["runs"][0]["durration_s"] = 1.0
        error = self.assertExitCode(2, "coincidence", self.write_config(data))
        self.assertIn("coincidence.runs[0].durration_s", str(error))

    def test_missing_config_file(self):
        self.assertExitCode(2, "coincidence", self.tmp / "absent.json")


class HomCommandTests(CommandTestCase):
    def short_config(self, **run):
        data = preset_data("ideal")
        data["hom"]["runs"] = [{"name": "short", "duration_s": 0.01, "pump_scale": 0.01, "fit_dip": False, **run}]
        return self.write_config(data)

    def test_short_run_without_fit(self):
        output = self.run_command("hom", self.short_config())
        self.assertIn("short:", output)
        summary = json.loads((self.tmp / "out" / "hom_short.json").read_text(encoding="utf-8"))
        self.assertEqual(summary["name"], "short")
        self.assertTrue((self.tmp / "out" / "hom_short_twofold.csv").exists())
        self.assertManifestVerifies()

    def test_too_few_wing_events(self):
        data = json.loads(self.short_config(fit_dip=True).read_text(encoding="utf-8"))
        data["hom"]["min_wing_events"] = 10 ** 9
        self.assertExitCode(3, "hom", self.write_config(data, "starved.json"))

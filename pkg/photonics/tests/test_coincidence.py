import math

import numpy as np
from django.test import SimpleTestCase, tag
from scipy import stats

from photonics.models import load_config, resolve_preset
from photonics.services.coincidence import (
    CoincidenceHistogram,
    bin_time_differences,
    coincidence_pairs,
    deconvolve_photon_width,
    fit_peak,
    histogram,
)
from photonics.services.engine import DetectionStream, RandomStream
from photonics.services.errors import DomainError, FitError
from photonics.services.pipeline import deconvolution_summary, simulate_coincidence

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def synthetic_peak(seed, fwhm_ps, peak_events=20000, background_events=10000, bin_width_ps=45.5):
    rng = np.random.default_rng(seed)
    dt = np.concatenate([
        rng.normal(0.0, fwhm_ps / FWHM_PER_SIGMA, peak_events),
        rng.uniform(-10000.0, 10000.0, background_events),
    ])
    return bin_time_differences(dt, bin_width_ps, (-10000.0, 10000.0))


class HistogramTests(SimpleTestCase):
    def test_binning(self):
        hist = histogram(np.array([0.0, 100.0]), np.array([50.0, 1000.0]), 100.0, (-200.0, 200.0))
        np.testing.assert_array_equal(hist.counts, [0, 1, 1, 0])
        self.assertEqual(hist.total_events, 2)
        np.testing.assert_array_equal(hist.bin_centers, [-150.0, -50.0, 50.0, 150.0])

    def test_all_stops_in_window_are_counted(self):
        hist = histogram(np.array([0.0]), np.array([10.0, 20.0, 30.0]), 10.0, (0.0, 100.0))
        self.assertEqual(hist.total_events, 3)

    def test_range_is_half_open(self):
        hist = histogram(np.array([0.0]), np.array([-100.0, 100.0]), 50.0, (-100.0, 100.0))
        self.assertEqual(hist.total_events, 1)
        self.assertEqual(hist.counts[0], 1)

    def test_accepts_detection_streams(self):
        start = DetectionStream("a", np.array([0.0, 1000.0]))
        stop = DetectionStream("b", np.array([40.0, 1040.0]))
        self.assertEqual(histogram(start, stop, 45.5, (-455.0, 455.0)).counts[10], 2)

    def test_coincidence_pairs_indices(self):
        start_idx, stop_idx, dt = coincidence_pairs([0.0, 10.0], [5.0, 12.0, 50.0], -10.0, 10.0)
        self.assertEqual(list(zip(start_idx.tolist(), stop_idx.tolist())), [(0, 0), (1, 0), (1, 1)])
        np.testing.assert_array_equal(dt, [5.0, -5.0, 2.0])

    def test_empty_streams(self):
        hist = histogram(np.empty(0), np.empty(0))
        self.assertEqual(hist.total_events, 0)
        self.assertEqual(hist.n_bins, int(math.ceil(20000 / 45.5)))

    def test_invalid_binning(self):
        with self.assertRaises(DomainError):
            histogram(np.empty(0), np.empty(0), 0.0)
        with self.assertRaises(DomainError):
            histogram(np.empty(0), np.empty(0), 10.0, (100.0, -100.0))

    def test_rebin_conserves_counts(self):
        hist = synthetic_peak(1, 400.0)
        for factor in (1, 2, 3, 7):
            rebinned = hist.rebin(factor)
            self.assertEqual(int(rebinned.counts.sum()), int(hist.counts.sum()))
            self.assertEqual(rebinned.bin_width_ps, hist.bin_width_ps * factor)
        with self.assertRaises(DomainError):
            hist.rebin(0)

    def test_merge(self):
        a = bin_time_differences([1.0, 2.0], 10.0, (0.0, 20.0))
        b = bin_time_differences([15.0], 10.0, (0.0, 20.0))
        merged = a + b
        np.testing.assert_array_equal(merged.counts, [2, 1])
        self.assertEqual(merged.total_events, 3)
        with self.assertRaises(DomainError):
            a + bin_time_differences([], 5.0, (0.0, 20.0))

    def test_swapping_start_and_stop_mirrors(self):
        rng = np.random.default_rng(17)
        a = np.sort(rng.uniform(0.0, 1e6, 3000))
        b = np.sort(np.concatenate([a + rng.normal(150.0, 60.0, a.size), rng.uniform(0.0, 1e6, 3000)]))
        forward = histogram(a, b, 100.0, (-1000.0, 1000.0))
        backward = histogram(b, a, 100.0, (-1000.0, 1000.0))
        np.testing.assert_array_equal(backward.counts, forward.counts[::-1])
        self.assertEqual(backward.total_events, forward.total_events)

    def test_independent_streams_are_flat(self):
        rng = np.random.default_rng(19)
        duration_ps = 1e9

        def poisson_stream(rate_per_ps):
            return np.sort(rng.uniform(0.0, duration_ps, rng.poisson(rate_per_ps * duration_ps)))

        hist = histogram(poisson_stream(4e-5), poisson_stream(4e-5), 100.0, (-5000.0, 5000.0))
        self.assertGreater(hist.counts.mean(), 100.0)
        self.assertGreater(stats.chisquare(hist.counts).pvalue, 0.01)

    def test_csv(self):
        hist = CoincidenceHistogram(45.5, (-45.5, 45.5), np.array([3, 4]), 7)
        self.assertEqual(hist.to_csv(), "bin_center_ps,counts\r\n-22.75,3\r\n22.75,4\r\n")


class PeakFitTests(SimpleTestCase):
    def test_broad_peak(self):
        fit = fit_peak(synthetic_peak(2, 400.0))
        self.assertAlmostEqual(fit.fwhm_ps / 400.0, 1.0, delta=0.03)
        self.assertAlmostEqual(fit.center_ps, 0.0, delta=10.0)
        self.assertGreater(fit.fwhm_stderr_ps, 0.0)
        self.assertAlmostEqual(fit.baseline, 10000 * 45.5 / 20000.0, delta=3.0)

    def test_peak_narrower_than_two_bins(self):
        fit = fit_peak(synthetic_peak(3, 80.0))
        self.assertAlmostEqual(fit.fwhm_ps / 80.0, 1.0, delta=0.05)

    def test_width_recovered_under_poisson_noise(self):
        edges = np.arange(-10000.0, 10000.0 + 45.5, 45.5)[:440 + 1]
        for fwhm_ps in (400.0, 80.0):
            sigma = fwhm_ps / FWHM_PER_SIGMA
            expected = 20.0 + 20000.0 * np.diff(stats.norm.cdf(edges, scale=sigma))
            for seed in range(20):
                counts = np.random.default_rng(seed).poisson(expected)
                hist = CoincidenceHistogram(45.5, (-10000.0, 10000.0), counts, int(counts.sum()))
                fit = fit_peak(hist)
                self.assertAlmostEqual(fit.fwhm_ps / fwhm_ps, 1.0, delta=0.05, msg=f"{fwhm_ps} ps, seed {seed}")

    def test_flat_histogram_rejected(self):
        rng = np.random.default_rng(4)
        hist = bin_time_differences(rng.uniform(-10000.0, 10000.0, 100000), 45.5, (-10000.0, 10000.0))
        with self.assertRaises(FitError) as ctx:
            fit_peak(hist)
        self.assertEqual(ctx.exception.counts["total_events"], 100000)

    def test_empty_histogram_rejected(self):
        with self.assertRaises(FitError):
            fit_peak(bin_time_differences([], 45.5, (-1000.0, 1000.0)))


class DeconvolutionTests(SimpleTestCase):
    def test_photon_width(self):
        width = deconvolve_photon_width(400.0, 80.0)
        self.assertAlmostEqual(width, 277.1, delta=0.1)
        self.assertAlmostEqual(width / 285.0, 1.0, delta=0.05)

    def test_jitter_dominated(self):
        with self.assertRaises(DomainError):
            deconvolve_photon_width(80.0, 80.0)
        with self.assertRaises(DomainError):
            deconvolve_photon_width(50.0, 80.0)


class SimulatedCoincidenceTests(SimpleTestCase):
    def test_determinism_and_thread_independence(self):
        config = load_config(resolve_preset("ideal"))
        run = config.coincidence_runs()[0]
        stream = RandomStream(config.seed).derive("coincidence", run.name)
        a = simulate_coincidence(stream, run, 5e10, threads=1)
        b = simulate_coincidence(stream, run, 5e10, threads=4)
        self.assertEqual(a.histogram.to_csv(), b.histogram.to_csv())
        self.assertEqual(a.pairs_generated, b.pairs_generated)
        self.assertGreater(a.histogram.total_events, 1000)

    def test_different_seed_differs(self):
        config = load_config(resolve_preset("ideal"))
        run = config.coincidence_runs()[0]
        a = simulate_coincidence(RandomStream(1).derive("coincidence", run.name), run, 1e11)
        b = simulate_coincidence(RandomStream(2).derive("coincidence", run.name), run, 1e11)
        self.assertNotEqual(a.histogram.to_csv(), b.histogram.to_csv())


@tag("slow")
class PaperCoincidenceTests(SimpleTestCase):
    """滤波与未滤波两条曲线：峰宽分别由相干时间与探测器抖动决定。"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        config = load_config(resolve_preset("paper"))
        root = RandomStream(config.seed)
        cls.outcomes = {
            run.name: simulate_coincidence(root.derive("coincidence", run.name), run, 1e11, threads=4)
            for run in config.coincidence_runs()
        }

    def test_unfiltered_width_is_jitter(self):
        outcome = self.outcomes["unfiltered"]
        self.assertGreaterEqual(outcome.histogram.total_events, 10000)
        self.assertAlmostEqual(outcome.fit.fwhm_ps / 80.0, 1.0, delta=0.1)

    def test_filtered_width_shows_coherence(self):
        outcome = self.outcomes["filtered"]
        self.assertGreaterEqual(outcome.histogram.total_events, 10000)
        self.assertAlmostEqual(outcome.fit.fwhm_ps / 400.0, 1.0, delta=0.1)

    def test_deconvolution(self):
        summary = deconvolution_summary(list(self.outcomes.values()))
        self.assertEqual(summary["filtered_run"], "filtered")
        self.assertAlmostEqual(summary["photon_coherence_fwhm_ps"] / 285.0, 1.0, delta=0.15)

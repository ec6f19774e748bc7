import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from photonics.services.engine import (
    DETECTOR_PRESETS,
    DetectionStream,
    DetectorConfig,
    DetectorKind,
    PairSource,
    RandomStream,
    Role,
    SourceSetup,
    apply_loss,
    chunks,
    dark_counts,
    dead_time_mask,
    detect,
    enforce_dead_time,
    generate_pairs,
    iter_chunks,
    map_chunks,
    photon_clicks,
    write_event_dump,
)
from photonics.services.errors import DomainError
from photonics.services.radiometry import PumpConfig, SourceConfig
from photonics.services.spectra import FilterChain, FilterStage, SpectralProfile

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def narrow_source(source_id=0):
    chain = FilterChain((FilterStage(SpectralProfile(1560.0, 10.0)),))
    config = SourceConfig(PumpConfig(780.0, 7.0), 1e-5, 1560.0, 80.0)
    return PairSource(source_id, config, chain, FilterChain())


class RandomStreamTests(SimpleTestCase):
    def test_same_stream_same_draws(self):
        a = RandomStream(42).derive("pairs", 3).generator().random(5)
        b = RandomStream(42).derive("pairs", 3).generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_derived_streams_differ(self):
        root = RandomStream(42)
        a = root.derive("pairs", 0).generator().random(5)
        b = root.derive("pairs", 1).generator().random(5)
        c = root.derive("dark", 0).generator().random(5)
        self.assertFalse(np.array_equal(a, b))
        self.assertFalse(np.array_equal(a, c))

    def test_seed_range(self):
        RandomStream(2 ** 64 - 1)
        with self.assertRaises(DomainError):
            RandomStream(2 ** 64)
        with self.assertRaises(DomainError):
            RandomStream(-1)


class DetectorConfigTests(SimpleTestCase):
    def test_presets(self):
        upconversion = DETECTOR_PRESETS["upconversion"]
        self.assertEqual(upconversion.kind, DetectorKind.UPCONVERSION)
        self.assertEqual(upconversion.efficiency, 0.03)
        self.assertEqual(upconversion.dark_rate_hz, 30e3)
        self.assertEqual(DETECTOR_PRESETS["sspd_a"].jitter_fwhm_ps, 70.0)
        self.assertEqual(DETECTOR_PRESETS["sspd_b"].efficiency, 0.055)
        self.assertTrue(DETECTOR_PRESETS["ingaas_herald"].gated)

    def test_validation(self):
        with self.assertRaises(DomainError):
            DetectorConfig(DetectorKind.SSPD, 1.5)
        with self.assertRaises(DomainError):
            DetectorConfig(DetectorKind.SSPD, 0.5, dark_rate_hz=-1.0)
        with self.assertRaises(ValueError):
            DetectorConfig("photomultiplier", 0.5)

    def test_scaled_is_capped(self):
        detector = DetectorConfig(DetectorKind.SSPD, 0.3, dead_time_ns=10.0)
        self.assertAlmostEqual(detector.scaled(2.0).efficiency, 0.6)
        self.assertEqual(detector.scaled(10.0).efficiency, 1.0)
        self.assertEqual(detector.scaled(10.0).dead_time_ps, 10000.0)


class PairGenerationTests(SimpleTestCase):
    def setUp(self):
        self.source = narrow_source()
        self.rng = np.random.default_rng(2024)

    def test_source_coherence_time(self):
        self.assertAlmostEqual(self.source.coherence_fwhm_ps, 357.0, delta=3.0)
        self.assertAlmostEqual(self.source.rate_hz / 3.436e7, 1.0, delta=0.01)

    def test_pair_count_is_poisson(self):
        duration = 1e9  # 1 ms
        pairs = generate_pairs(self.rng, self.source, duration)
        mean = self.source.expected_pairs(duration)
        self.assertLess(abs(len(pairs) - mean), 5.0 * math.sqrt(mean))

    def test_emission_times(self):
        pairs = generate_pairs(self.rng, self.source, 1e9, start_ps=5e9)
        times = pairs.emission_time_ps
        self.assertTrue(np.all(np.diff(times) >= 0))
        self.assertGreaterEqual(times.min(), 5e9)
        self.assertLess(times.max(), 6e9)
        gaps = np.diff(times) * self.source.rate_hz / 1e12
        self.assertGreater(stats.kstest(gaps, "expon").pvalue, 0.01)

    def test_energy_conservation(self):
        pairs = generate_pairs(self.rng, self.source, 1e8)
        residual = 1.0 / pairs.signal_nm + 1.0 / pairs.idler_nm - 1.0 / 780.0
        self.assertLess(np.max(np.abs(residual)) * 780.0, 1e-12)

    def test_pair_ids_offset(self):
        pairs = generate_pairs(self.rng, self.source, 1e7, pair_id_offset=1000)
        np.testing.assert_array_equal(pairs.pair_id, 1000 + np.arange(len(pairs)))

    def test_survival_thinning(self):
        duration = 1e10
        pairs = generate_pairs(self.rng, self.source, duration, survival=(0.1, 0.2))
        keep = 1.0 - 0.9 * 0.8
        mean = self.source.expected_pairs(duration) * keep
        self.assertLess(abs(len(pairs) - mean), 5.0 * math.sqrt(mean))
        self.assertTrue(np.all(pairs.signal_alive | pairs.idler_alive))
        self.assertAlmostEqual(pairs.signal_alive.mean(), 0.1 / keep, delta=0.01)
        self.assertAlmostEqual(pairs.idler_alive.mean(), 0.2 / keep, delta=0.01)
        self.assertAlmostEqual(pairs.both_alive.mean(), 0.02 / keep, delta=0.005)

    def test_negative_duration(self):
        with self.assertRaises(DomainError):
            generate_pairs(self.rng, self.source, -1.0)

    def test_loss(self):
        pairs = apply_loss(self.rng, generate_pairs(self.rng, self.source, 1e9), 0.13)
        self.assertAlmostEqual(pairs.signal_alive.mean(), 0.13, delta=0.01)
        self.assertAlmostEqual(pairs.idler_alive.mean(), 0.13, delta=0.01)
        photons = pairs.photons(Role.SIGNAL)
        self.assertEqual(len(photons), int(pairs.signal_alive.sum()))
        with self.assertRaises(DomainError):
            apply_loss(self.rng, pairs, 1.1)

    def test_loss_is_independent_per_arm(self):
        pairs = apply_loss(self.rng, generate_pairs(self.rng, self.source, 1e10), 0.13)
        self.assertGreater(len(pairs), 300000)
        self.assertAlmostEqual(pairs.both_alive.mean(), 0.13 * 0.13, delta=0.0015)
        given_signal = pairs.idler_alive[pairs.signal_alive].mean()
        self.assertAlmostEqual(given_signal, 0.13, delta=0.01)

        pairs = apply_loss(self.rng, generate_pairs(self.rng, self.source, 1e10), 0.13, 0.5)
        self.assertAlmostEqual(pairs.both_alive.mean(), 0.13 * 0.5, delta=0.003)

    def test_source_setup(self):
        setup = SourceSetup(self.source.source, self.source.signal_chain, FilterChain(), 0.13)
        self.assertAlmostEqual(setup.boosted_transmission(5.0), 0.65)
        self.assertEqual(setup.boosted_transmission(10.0), 1.0)
        self.assertEqual(setup.build(3).source_id, 3)
        with self.assertRaises(DomainError):
            SourceSetup(self.source.source, FilterChain(), FilterChain(), 1.3)


class DetectionTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(99)
        self.pairs = generate_pairs(self.rng, narrow_source(), 1e9)
        self.photons = self.pairs.photons(Role.SIGNAL)

    def test_efficiency(self):
        detector = DetectorConfig(DetectorKind.SSPD, 0.25)
        clicks = photon_clicks(self.rng, self.photons, detector, "d0", include_wavepacket=False)
        self.assertAlmostEqual(len(clicks) / len(self.photons), 0.25, delta=0.02)
        self.assertEqual(clicks.detector_id, "d0")
        self.assertFalse(np.any(clicks.is_dark))

    def test_click_time_spread(self):
        detector = DetectorConfig(DetectorKind.SSPD, 1.0, jitter_fwhm_ps=70.0)
        clicks = photon_clicks(self.rng, self.photons, detector, include_wavepacket=False)
        offsets = clicks.timestamps_ps - self.photons.emission_time_ps
        self.assertAlmostEqual(np.std(offsets) * FWHM_PER_SIGMA / 70.0, 1.0, delta=0.05)

        with_packet = photon_clicks(np.random.default_rng(1), self.photons, DetectorConfig(DetectorKind.SSPD, 1.0))
        spread = np.std(with_packet.timestamps_ps - self.photons.emission_time_ps) * FWHM_PER_SIGMA
        self.assertAlmostEqual(spread / self.photons.coherence_fwhm_ps[0], 1.0, delta=0.05)

    def test_dark_counts(self):
        detector = DetectorConfig(DetectorKind.SSPD, 0.05, dark_rate_hz=1e3)
        darks = dark_counts(self.rng, detector, 10e12, start_ps=1e12, detector_id="d1")
        self.assertLess(abs(len(darks) - 1e4), 500)
        self.assertTrue(np.all(darks.is_dark))
        self.assertTrue(np.all(np.diff(darks.timestamps_ps) >= 0))
        self.assertGreaterEqual(darks.timestamps_ps.min(), 1e12)
        no_dark = dark_counts(self.rng, DetectorConfig(DetectorKind.SSPD, 0.05), 1e12)
        self.assertEqual(len(no_dark), 0)

    def test_detect_respects_dead_time(self):
        detector = DetectorConfig(DetectorKind.SSPD, 1.0, dark_rate_hz=1e5, dead_time_ns=50.0)
        stream = detect(self.rng, self.photons, detector, 1e9, "d0")
        gaps = np.diff(stream.timestamps_ps)
        self.assertTrue(np.all(gaps >= 50e3))
        self.assertGreater(len(stream), 0)


class DeadTimeTests(SimpleTestCase):
    def test_non_paralyzable(self):
        mask = dead_time_mask(np.array([0.0, 5.0, 10.0, 12.0, 25.0]), 10.0)
        np.testing.assert_array_equal(mask, [True, False, True, False, True])

    def test_carried_state(self):
        mask = dead_time_mask(np.array([3.0, 20.0]), 10.0, last_accepted_ps=-5.0)
        np.testing.assert_array_equal(mask, [False, True])
        self.assertEqual(len(dead_time_mask(np.array([]), 10.0)), 0)

    def test_split_processing_matches_whole(self):
        rng = np.random.default_rng(5)
        times = np.sort(rng.uniform(0.0, 1e6, 20000))
        whole = dead_time_mask(times, 100.0)
        head, tail = times[:9000], times[9000:]
        head_mask = dead_time_mask(head, 100.0)
        tail_mask = dead_time_mask(tail, 100.0, last_accepted_ps=head[head_mask][-1])
        np.testing.assert_array_equal(np.concatenate([head_mask, tail_mask]), whole)

    def test_invariant_on_random_stream(self):
        rng = np.random.default_rng(6)
        stream = DetectionStream("d", np.sort(rng.uniform(0.0, 1e7, 50000)))
        kept = enforce_dead_time(stream, 500.0)
        self.assertTrue(np.all(np.diff(kept.timestamps_ps) >= 500.0))
        self.assertLess(len(kept), len(stream))


class StreamTests(SimpleTestCase):
    def test_merge_is_time_ordered(self):
        a = DetectionStream("d", np.array([1.0, 5.0]), np.array([0, 1]), np.array([0, 0]), np.array([0, 0], np.int8))
        b = DetectionStream("d", np.array([3.0]))
        merged = DetectionStream.merge("d", [a, b])
        np.testing.assert_array_equal(merged.timestamps_ps, [1.0, 3.0, 5.0])
        np.testing.assert_array_equal(merged.is_dark, [False, True, False])
        tags = [r.origin_tag for r in merged.records()]
        self.assertEqual(tags, ["0:0:signal", "dark", "0:1:signal"])
        self.assertEqual(len(DetectionStream.merge("d", [])), 0)

    def test_event_dump(self):
        stream = DetectionStream("d1", np.array([2.5, 1.0]), np.array([7, -1]), np.array([1, -1]),
                                 np.array([1, -1], np.int8))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "events.csv"
            write_event_dump(path, [stream])
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines, ["detector_id,timestamp_ps,origin_tag", "d1,1.0,dark", "d1,2.5,1:7:idler"])


class ChunkTests(SimpleTestCase):
    def test_chunks_cover_duration(self):
        parts = chunks(RandomStream(1), 2.5e11, 1e11)
        self.assertEqual([c.index for c in parts], [0, 1, 2])
        self.assertEqual(parts[2].start_ps, 2e11)
        self.assertAlmostEqual(parts[2].duration_ps, 0.5e11)
        self.assertEqual(chunks(RandomStream(1), 0.0, 1e11), [])
        with self.assertRaises(DomainError):
            chunks(RandomStream(1), 1.0, 0.0)

    def test_thread_count_does_not_change_results(self):
        parts = chunks(RandomStream(8), 1e12, 1e11)

        def worker(chunk):
            return chunk.stream.generator().random(3).tolist()

        serial = map_chunks(worker, parts, threads=1)
        self.assertEqual(map_chunks(worker, parts, threads=4), serial)
        self.assertEqual(list(iter_chunks(worker, parts, threads=3)), serial)

"""Cost model algebra and the headline latency bands."""

import csv
import io

import numpy as np
import pytest

from parloop.costmodel import (
    ARCH_ROWS,
    HardwareProfile,
    decode_step_cost,
    default_profile,
    latency_ratio,
    report_csv,
    report_text,
    standin_config,
    sweep,
    variant_config,
)
from parloop.errors import ConfigError
from parloop.model import ModelConfig, count_params_from_config


BATCHES = (4, 8, 16, 32, 64)
CONTEXT = 5000


@pytest.fixture(scope="module")
def cfg():
    return standin_config()


@pytest.fixture(scope="module")
def profile():
    return default_profile()


class TestRowAlgebra:
    def test_fused_rows_read_weights_once(self, cfg, profile):
        serial = decode_step_cost("loop", cfg, profile, 4, CONTEXT)
        fused = decode_step_cost("loop_clp", cfg, profile, 4, CONTEXT)
        assert serial.passes == cfg.loops and fused.passes == 1
        # identical cache traffic, weight reads collapse to one pass
        assert fused.kv_bytes == serial.kv_bytes
        assert fused.weight_bytes < serial.weight_bytes
        assert fused.flops == serial.flops

    def test_sharing_removes_loop_factor_from_cache(self, cfg, profile):
        fused = decode_step_cost("loop_clp", cfg, profile, 4, CONTEXT)
        shared = decode_step_cost("loop_clp_kvshare", cfg, profile, 4, CONTEXT)
        assert fused.kv_bytes == cfg.loops * shared.kv_bytes

    def test_window_adds_bounded_bytes_and_gate_weights(self, cfg, profile):
        shared = decode_step_cost("loop_clp_kvshare", cfg, profile, 4, CONTEXT)
        windowed = decode_step_cost("plt", cfg, profile, 4, CONTEXT)
        kv_extra = windowed.kv_bytes - shared.kv_bytes
        want = 4 * (cfg.loops - 1) * min(cfg.window, CONTEXT) \
            * profile.kv_bytes_per_entry * cfg.n_layers
        assert kv_extra == want
        gate_params = cfg.n_layers * (cfg.d_model * cfg.n_heads + cfg.n_heads)
        assert windowed.weight_bytes - shared.weight_bytes == pytest.approx(
            gate_params * profile.weight_bytes_per_param)

    def test_single_loop_collapses_every_row_to_vanilla(self, profile):
        cfg = ModelConfig(vocab=1024, d_model=64, n_layers=4, n_heads=4,
                          loops=1, mode="plt", gswa=True, window=8, max_seq=4096)
        v = decode_step_cost("vanilla", cfg, profile, 8, 256)
        for arch in ("loop", "loop_clp", "loop_clp_kvshare"):
            c = decode_step_cost(arch, cfg, profile, 8, 256)
            assert c.bytes_total == v.bytes_total
            assert c.latency == v.latency
        # the gated row differs only by its gate weights when L = 1
        p = decode_step_cost("plt", cfg, profile, 8, 256)
        assert p.kv_bytes == v.kv_bytes

    def test_window_wider_than_context_is_clamped(self, profile):
        cfg = ModelConfig(vocab=1024, d_model=64, n_layers=2, n_heads=4,
                          loops=2, mode="plt", gswa=True, window=4096, max_seq=8192)
        shared = decode_step_cost("loop_clp_kvshare", cfg, profile, 1, 100)
        windowed = decode_step_cost("plt", cfg, profile, 1, 100)
        assert windowed.kv_bytes - shared.kv_bytes == \
            100 * profile.kv_bytes_per_entry * cfg.n_layers

    def test_unknown_row_rejected(self, cfg, profile):
        with pytest.raises(ConfigError):
            decode_step_cost("hybrid", cfg, profile, 1, 100)
        with pytest.raises(ConfigError):
            variant_config(cfg, "hybrid")

    def test_degenerate_sizes_rejected(self, cfg, profile):
        with pytest.raises(ConfigError):
            decode_step_cost("plt", cfg, profile, 0, 100)
        with pytest.raises(ConfigError):
            decode_step_cost("plt", cfg, profile, 1, 0)


class TestMonotonicity:
    def test_latency_grows_with_batch(self, cfg, profile):
        for arch in ARCH_ROWS:
            lats = [decode_step_cost(arch, cfg, profile, b, CONTEXT).latency
                    for b in BATCHES]
            assert all(b >= a for a, b in zip(lats, lats[1:]))

    def test_latency_grows_with_context(self, cfg, profile):
        for arch in ARCH_ROWS:
            lats = [decode_step_cost(arch, cfg, profile, 8, n).latency
                    for n in (500, 2000, 5000, 8000)]
            assert all(b >= a for a, b in zip(lats, lats[1:]))


class TestHeadlineNumbers:
    def test_standin_is_desk_scale_dense(self, cfg):
        total = count_params_from_config(variant_config(cfg, "vanilla"))
        assert 6.5e8 < total < 7.2e8

    def test_cache_byte_ratio_with_window(self, cfg, profile):
        shared = decode_step_cost("loop_clp_kvshare", cfg, profile, 1, CONTEXT)
        windowed = decode_step_cost("plt", cfg, profile, 1, CONTEXT)
        ratio = windowed.kv_bytes / shared.kv_bytes
        assert 1.010 <= ratio <= 1.020  # 1 + 64/5000

    def test_serial_loop_band(self, cfg, profile):
        for b in BATCHES:
            r = latency_ratio("loop", cfg, profile, b, CONTEXT)
            assert 1.9 <= r <= 2.0, (b, r)

    def test_parallel_loop_band(self, cfg, profile):
        for b in BATCHES:
            r = latency_ratio("plt", cfg, profile, b, CONTEXT)
            assert 1.0 <= r <= 1.10, (b, r)

    def test_fused_only_overhead_starts_low_and_grows(self, cfg, profile):
        ratios = [latency_ratio("loop_clp", cfg, profile, b, CONTEXT)
                  for b in BATCHES]
        assert 1.15 <= ratios[0] <= 1.30
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_decoding_stays_memory_bound_at_defaults(self, cfg, profile):
        for arch in ARCH_ROWS:
            for b in BATCHES:
                assert decode_step_cost(arch, cfg, profile, b, CONTEXT).bound == "memory"

    def test_compute_bound_machine_pays_full_loop_factor(self, cfg):
        starved = HardwareProfile(name="compute-starved", mem_bandwidth=1e15,
                                  peak_flops=1e9, weight_bytes_per_param=1.4,
                                  kv_bytes_per_entry=512.0)
        r = latency_ratio("plt", cfg, starved, 4, CONTEXT)
        L = cfg.loops
        assert L - 0.15 <= r <= L
        assert decode_step_cost("plt", cfg, starved, 4, CONTEXT).bound == "compute"


class TestReports:
    def test_text_table_lists_every_row(self, cfg, profile):
        txt = report_text(sweep(cfg, profile, (4, 64), CONTEXT))
        for arch in ARCH_ROWS:
            assert arch in txt
        assert "vs vanilla" in txt
        assert "1.000x" in txt  # vanilla against itself

    def test_csv_parses_and_is_numeric(self, cfg, profile):
        out = report_csv(sweep(cfg, profile, (4,), CONTEXT))
        rows = list(csv.reader(io.StringIO(out)))
        assert rows[0][0] == "arch"
        assert len(rows) == 1 + len(ARCH_ROWS)
        for row in rows[1:]:
            assert float(row[8]) > 0  # latency column
            assert row[9] in ("memory", "compute")

    def test_sweep_covers_batches_times_archs(self, cfg, profile):
        costs = sweep(cfg, profile, BATCHES, CONTEXT)
        assert len(costs) == len(BATCHES) * len(ARCH_ROWS)

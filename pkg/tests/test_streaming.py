import numpy as np
import pytest

from echoguard.audio import AudioBuffer
from echoguard.jammer import AttenuationConfig, ConfigError, JammerConfig, echoguard
from echoguard.room import RoomConfig
from echoguard.streaming import StreamError, StreamProcessor, process_stream

from helpers import speech_like

FS = 16000
ROOM = RoomConfig(8, 6, 3, (2.0, 2.0, 1.5), (6.0, 4.0, 1.2), 0.3)


def _run(x, cfg, frame_len=None):
    proc = StreamProcessor(cfg, frame_len)
    fl = proc.frame_len
    out = [proc.process(x[i:i + fl]) for i in range(0, len(x) - len(x) % fl, fl)]
    return proc, out + proc.flush()


def test_single_frame_flushes_to_full_output():
    cfg = JammerConfig(room=ROOM, output_gain_mode="none")
    x = np.random.default_rng(0).standard_normal(160)
    proc, out = _run(x, cfg)
    y = np.concatenate(out)
    assert out[0].shape == (160,) and np.all(out[0] == 0)
    batch = echoguard(AudioBuffer(x, FS), cfg).samples
    assert np.allclose(y[proc.latency_samples:], batch, atol=1e-12)


@pytest.mark.parametrize("frame_len", [160, 441, 1000])
def test_stream_equals_batch(frame_len):
    cfg = JammerConfig(room=ROOM, output_gain_mode="none", attenuation=AttenuationConfig(seed=3))
    x = speech_like(2.0, FS, 3).samples[:frame_len * (32000 // frame_len)]
    proc, out = _run(x, cfg, frame_len)
    y = np.concatenate(out)[proc.latency_samples:]
    batch = echoguard(AudioBuffer(x, FS), cfg).samples
    assert len(y) == len(batch)
    assert np.sqrt(np.mean((y - batch) ** 2)) <= 1e-5


def test_peak_mode_is_batch_up_to_gain():
    cfg = JammerConfig(room=ROOM, attenuation=AttenuationConfig(seed=4))
    x = speech_like(1.0, FS, 4).samples
    proc, out = _run(x, cfg)
    y = np.concatenate(out)[proc.latency_samples:]
    raw = echoguard(AudioBuffer(x, FS), JammerConfig(room=ROOM, output_gain_mode="none",
                                                      attenuation=AttenuationConfig(seed=4))).samples
    assert np.allclose(y, proc.gain * raw, atol=1e-12)
    assert np.max(np.abs(y)) <= 0.9


def test_latency_report():
    proc = StreamProcessor(JammerConfig(room=ROOM))
    rep = proc.latency_report()
    assert rep["latency_samples"] == proc.block >= 4096 - proc.frame_len
    assert rep["frame_samples"] == 160
    assert rep["ir_tail_samples"] == proc.ir_len - 1


def test_frame_length_change_rejected():
    proc = StreamProcessor(JammerConfig(room=ROOM))
    proc.process(np.zeros(160))
    with pytest.raises(StreamError):
        proc.process(np.zeros(100))


def test_process_after_flush_rejected():
    proc = StreamProcessor(JammerConfig(room=ROOM))
    proc.process(np.zeros(160))
    proc.flush()
    with pytest.raises(StreamError):
        proc.process(np.zeros(160))


def test_energy_selection_not_streamable():
    with pytest.raises(ConfigError):
        StreamProcessor(JammerConfig(room=ROOM, attenuation=AttenuationConfig(selection="energy")))


def test_process_stream_generator():
    cfg = JammerConfig(room=ROOM, output_gain_mode="none")
    x = np.random.default_rng(1).standard_normal(1600)
    frames = list(process_stream((x[i:i + 160] for i in range(0, 1600, 160)), cfg))
    assert all(len(f) <= 160 for f in frames)
    _, direct = _run(x, cfg)
    assert np.array_equal(np.concatenate(frames), np.concatenate(direct))

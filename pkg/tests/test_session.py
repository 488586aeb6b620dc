import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from vgaze.calibration import HistoricalTrajectories, RoughGazeSample, TransformSource, TransformVector
from vgaze.config import RunConfig
from vgaze.corpus import Corpus
from vgaze.heatmap import Frame, SaliencyHeatmap, pixel_to_screen
from vgaze.session import (
    FrameArrived,
    GazeSample,
    HeadPose,
    Orientation,
    PoseSample,
    ProtocolError,
    Session,
    apply_transform,
    head_movement_detect,
    landscape_compensate,
    run_events,
    select_frame,
)
from vgaze.sim import ScenarioConfig, write_corpus
from vgaze.temporal import Attention, hamming, phash

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
DT = 33.0


def point_heatmap(col, row, size=68):
    v = np.zeros((size, size), dtype=np.uint8)
    v[row, col] = 255
    return SaliencyHeatmap(v)


def scene_pixels(scene):
    """A blocky texture that differs strongly between scene ids."""
    rng = np.random.default_rng(1000 + scene)
    return np.kron(rng.integers(0, 256, size=(4, 4)), np.ones((17, 17))).astype(np.uint8)


class Script:
    """Hand-built event stream with a known saliency target per frame.

    Every frame carries a one-pixel external heatmap at its target; the stub
    bottom-up detector returns the same map, so both saliency paths agree and
    the test observes which one ran through ``detector_calls``.
    """

    def __init__(self, n, offset=lambda i: (0.1, -0.05), cuts=(), jumps=(), gaze=None, target=None):
        self.n = n
        self.offset = offset
        self.target_px = target or (lambda i: (20 + i % 5, 30 + i % 3))
        self.events = []
        self.rough = {}
        self.detector_calls = []
        scene = 0
        pose = [0.0] * 6
        for i in range(n):
            t = i * DT
            if i in jumps:
                pose = [pose[0] + 0.05] + pose[1:]
            self.events.append(PoseSample(HeadPose(t, tuple(pose))))
            if i in cuts:
                scene += 1
            col, row = self.target_px(i)
            self.events.append(FrameArrived(Frame(i, t, scene_pixels(scene), i in cuts), point_heatmap(col, row)))
            tx, ty = pixel_to_screen(col, row, 68, 68)
            for k in range(2):
                if gaze is not None:
                    pos = gaze(i, k)
                else:
                    dx, dy = offset(i)
                    pos = (tx + dx, ty + dy)
                s = RoughGazeSample(t + k * DT / 2, i, pos)
                self.rough[(s.timestamp_ms, i)] = pos
                self.events.append(GazeSample(s))

    def detector(self, frame):
        self.detector_calls.append(frame.index)
        return point_heatmap(*self.target_px(frame.index))

    def run(self, config=None, **kw):
        session = Session(config or RunConfig(**kw), self.detector)
        outs = run_events(session, self.events)
        return session, outs


def transforms(outs):
    return [o.transform for o in outs if o.transform is not None]


def gazes(outs):
    return [g for o in outs for g in o.gazes]


def opened(session, action=("opened", "restarted")):
    return [w for w in session.window_log if w.action in action]


# ---------------------------------------------------------------- pure operations


def test_apply_transform_examples():
    assert apply_transform((0.6, 0.4), TransformVector(-0.1, 0.1)) == pytest.approx((0.5, 0.5))
    assert apply_transform((0.3, 0.7), TransformVector(0, 0)) == (0.3, 0.7)
    assert apply_transform(RoughGazeSample(0, 0, (0.99, 0.5)), TransformVector(0.05, 0)) == pytest.approx((1.04, 0.5))


def test_head_movement_examples():
    a = HeadPose(0, (0.0,) * 6)
    assert not head_movement_detect(a, a)
    assert not head_movement_detect(a, HeadPose(1, (0.005,) + (0.0,) * 5))
    assert head_movement_detect(a, HeadPose(1, (0.006,) + (0.0,) * 5))
    assert head_movement_detect(a, HeadPose(1, (0.003, 0.0045) + (0.0,) * 4)) == (math.hypot(0.003, 0.0045) > 0.005)


def test_head_movement_dimension_mismatch():
    with pytest.raises(ValueError):
        head_movement_detect(HeadPose(0, (0.0,) * 6), HeadPose(1, (0.0,) * 5))


def test_head_pose_must_be_finite():
    with pytest.raises(ValueError):
        HeadPose(0, (0.0, math.nan))
    with pytest.raises(ValueError):
        HeadPose(0, ())


def test_landscape_examples():
    assert landscape_compensate((0.8, 0.2), 10, Orientation.PORTRAIT) == (0.8, 0.2)
    assert landscape_compensate((0.8, 0.2), 10, Orientation.LANDSCAPE_LEFT) == pytest.approx((0.784, 0.23))
    assert landscape_compensate((0.8, 0.2), 10, Orientation.LANDSCAPE_RIGHT) == pytest.approx((0.816, 0.23))
    assert landscape_compensate((0.5, 0.3), 10, Orientation.LANDSCAPE_LEFT)[1] == 0.3


@given(st.floats(-90, 90), st.floats(0, 1), st.sampled_from(list(Orientation)))
def test_landscape_keeps_origin_column(rot, y, orientation):
    assert landscape_compensate((0.0, y), rot, orientation)[0] == 0.0


# ---------------------------------------------------------------- session state machine


def test_fresh_session_emits_rough_gaze_unchanged():
    s = Session(RunConfig())
    out = s.step(GazeSample(RoughGazeSample(0, 0, (0.4, 0.4))))
    assert [(g.x, g.y, g.calibrated) for g in out.gazes] == [(0.4, 0.4, False)]
    assert s.current_transform is None


def test_initial_window_is_reported_with_the_first_step():
    s = Session(RunConfig())
    first = s.step(GazeSample(RoughGazeSample(0, 0, (0.4, 0.4))))
    assert [(w.action, w.trigger, w.target_len, w.saliency) for w in first.windows] == [
        ("opened", TransformSource.INITIAL, 10, "TopDown")]
    assert s.step(GazeSample(RoughGazeSample(1, 0, (0.4, 0.4)))).windows == []


def test_out_of_order_events_raise():
    s = Session(RunConfig())
    s.step(GazeSample(RoughGazeSample(100, 0, (0.4, 0.4))))
    s.step(GazeSample(RoughGazeSample(100, 0, (0.4, 0.4))))
    with pytest.raises(ProtocolError):
        s.step(GazeSample(RoughGazeSample(99, 0, (0.4, 0.4))))


def test_initial_window_recovers_negated_offset():
    script = Script(30)
    session, outs = script.run()
    ts = transforms(outs)
    assert len(ts) == 1
    t = ts[0]
    assert t.source is TransformSource.INITIAL
    assert (t.dx, t.dy) == pytest.approx((-0.1, 0.05), abs=1e-12)
    # attempted when the frame after the tenth accepted one arrives
    assert t.computed_at_ms == 10 * DT
    # top-down start: the external heatmaps were used, the detector never ran
    assert script.detector_calls == []


def test_emitted_gaze_is_rough_plus_active_transform():
    script = Script(60, jumps={30})
    session, outs = script.run()
    active = None
    for o in outs:
        for g in o.gazes:
            rx, ry = script.rough[(g.t_ms, g.frame)]
            if active is None:
                assert (g.x, g.y, g.calibrated) == (rx, ry, False)
            else:
                assert (g.x, g.y) == (rx + active.dx, ry + active.dy) and g.calibrated
        if o.transform is not None:
            active = o.transform
    assert active is session.current_transform


def test_no_trigger_means_no_further_transforms():
    session, outs = Script(200).run()
    assert len(transforms(outs)) == 1
    assert [w.action for w in session.window_log] == ["opened", "closed"]


def test_emission_in_timestamp_order():
    _, outs = Script(50, cuts={20}, jumps={35}).run()
    ts = [g.t_ms for g in gazes(outs)]
    assert ts == sorted(ts) and len(ts) == 100


def test_head_move_window_and_new_transform():
    offset = lambda i: (0.1, -0.05) if i < 40 else (-0.1, 0.1)
    session, outs = Script(80, offset=offset, jumps={40}).run()
    head = [w for w in opened(session) if w.trigger is TransformSource.HEAD_MOVE]
    assert len(head) == 1
    assert head[0].t_ms == 40 * DT and head[0].target_len == 10 and head[0].saliency == "TopDown"
    ts = transforms(outs)
    assert [t.source for t in ts] == [TransformSource.INITIAL, TransformSource.HEAD_MOVE]
    assert (ts[1].dx, ts[1].dy) == pytest.approx((0.1, -0.1), abs=1e-12)
    assert ts[1].computed_at_ms == 50 * DT


def test_no_recalibration_ignores_triggers():
    session, outs = Script(80, cuts={30}, jumps={50}).run(recalibration=False)
    assert len(transforms(outs)) == 1
    assert len(opened(session)) == 1


def test_scene_cut_opens_five_frame_bottom_up_window():
    script = Script(60, cuts={30})
    session, outs = script.run()
    cut = [w for w in opened(session) if w.trigger is TransformSource.SCENE_CUT]
    assert len(cut) == 1
    assert (cut[0].frame, cut[0].target_len, cut[0].saliency) == (30, 5, "BottomUp")
    assert script.detector_calls == [30, 31, 32, 33, 34]
    ts = transforms(outs)
    assert ts[-1].source is TransformSource.SCENE_CUT and ts[-1].computed_at_ms == 35 * DT


def test_attention_flips_exactly_five_frames_after_cut():
    script = Script(45, cuts={30})
    session = Session(RunConfig(), script.detector)
    modes = {}
    for ev in script.events:
        session.step(ev)
        if isinstance(ev, FrameArrived):
            modes[ev.frame.index] = session.attention.mode
    assert [modes[i] for i in range(29, 37)] == [Attention.TOP_DOWN] + [Attention.BOTTOM_UP] * 5 + [Attention.TOP_DOWN] * 2


def test_head_move_during_bottom_up_skips_next_cut():
    session, outs = Script(90, cuts={30, 33, 60}, jumps={32}).run()
    head = [w for w in opened(session) if w.trigger is TransformSource.HEAD_MOVE]
    assert len(head) == 1 and head[0].saliency == "BottomUp" and head[0].target_len == 10
    cut_windows = [w for w in opened(session) if w.trigger is TransformSource.SCENE_CUT]
    # the cut at 33 falls in the bottom-up period the movement joined and is skipped
    assert [w.frame for w in cut_windows] == [30, 60]
    assert [w.frame for w in session.window_log if w.action == "skipped"] == [33]


def test_pose_and_cut_in_same_batch_become_one_bottom_up_head_move_window():
    session, outs = Script(60, cuts={30}, jumps={30}).run()
    late = [w for w in opened(session) if w.t_ms >= 30 * DT]
    assert all(w.trigger is TransformSource.HEAD_MOVE for w in late)
    assert late[-1].saliency == "BottomUp" and late[-1].target_len == 10
    assert transforms(outs)[-1].source is TransformSource.HEAD_MOVE


def test_mid_window_head_move_restarts_collection():
    offset = lambda i: (0.1, -0.05) if i < 40 else (0.0, 0.05) if i < 45 else (-0.1, 0.1)
    session, outs = Script(80, offset=offset, jumps={40, 45}).run()
    ts = transforms(outs)
    assert [t.source for t in ts] == [TransformSource.INITIAL, TransformSource.HEAD_MOVE]
    assert ts[1].computed_at_ms == 55 * DT
    assert (ts[1].dx, ts[1].dy) == pytest.approx((0.1, -0.1), abs=1e-12)
    assert [w.action for w in session.window_log][-3:] == ["opened", "restarted", "closed"]


def test_window_cap_resets_a_window_that_never_converges():
    # gaze scattered on a coarse grid: no gaze cluster ever reaches min size, so every attempt defers
    scatter = lambda i, k: (0.15 * (i % 6), 0.15 * ((i // 6) % 6))
    session, outs = Script(45, gaze=scatter).run()
    assert transforms(outs) == []
    resets = [w for w in session.window_log if w.action == "reset"]
    assert [w.frame for w in resets] == [39]
    assert len(session.window.vectors) == 5


def test_gaze_for_unknown_frame_is_emitted_but_not_collected():
    session = Session(RunConfig())
    session.step(FrameArrived(Frame(0, 0, scene_pixels(0)), point_heatmap(20, 30)))
    out = session.step(GazeSample(RoughGazeSample(5, 999, (0.3, 0.3))))
    assert [(g.x, g.y) for g in out.gazes] == [(0.3, 0.3)]
    assert session.window.samples == []


def test_landscape_session_compensates_before_transform():
    session = Session(RunConfig(orientation="LandscapeLeft"))
    session.step(PoseSample(HeadPose(0, (0.0,) * 6, face_rotation_deg=10)))
    out = session.step(GazeSample(RoughGazeSample(1, 0, (0.8, 0.2))))
    g = out.gazes[0]
    assert (g.x, g.y) == pytest.approx((0.784, 0.23))


def test_external_heatmap_size_mismatch_is_reported():
    session = Session(RunConfig())
    with pytest.raises(ValueError, match="external heatmap"):
        session.step(FrameArrived(Frame(0, 0, scene_pixels(0)), point_heatmap(2, 2, size=32)))


def test_timings_report_every_module():
    session, _ = Script(40, cuts={20}).run()
    t = session.timings
    assert set(t) == {"scene_cut", "bottom_up", "top_down", "selection", "calibration", "compensation"}
    assert t["scene_cut"]["calls"] == 40 and t["compensation"]["calls"] == 80
    assert t["bottom_up"]["calls"] == 5


triggers = st.lists(st.integers(1, 79), max_size=6, unique=True)


@settings(max_examples=40, deadline=None)
@given(triggers, triggers)
@example([1, 3, 4], [2])
def test_window_shapes_and_skip_rule(cuts, jumps):
    cuts, jumps = set(cuts), set(jumps)
    script = Script(80, cuts=cuts, jumps=jumps)
    session, outs = script.run()
    windows = opened(session)
    for w in windows:
        if w.trigger is TransformSource.SCENE_CUT:
            assert (w.target_len, w.saliency) == (5, "BottomUp")
        elif w.trigger is TransformSource.HEAD_MOVE:
            assert w.target_len == 10
    # the skip rule: after a movement inside a bottom-up period, no cut window opens until that period ends
    for j in jumps:
        last_cut = max((c for c in cuts if c <= j), default=None)
        if last_cut is None or j - last_cut >= 5 or j == last_cut:
            continue
        end = last_cut + 5
        assert not [w for w in windows if w.trigger is TransformSource.SCENE_CUT and j < (w.frame or 0) < end]
    ts = [g.t_ms for g in gazes(outs)]
    assert ts == sorted(ts)


# ---------------------------------------------------------------- history-aware selection


def large_region_heatmap():
    v = np.zeros((68, 68), dtype=np.uint8)
    v[:60, :55] = 200
    return SaliencyHeatmap(v)


def test_history_admits_rejected_frames():
    hist = HistoricalTrajectories({3: ((0.4, 0.6), (0.41, 0.59))})
    cfg = RunConfig()
    vec, scs = select_frame(large_region_heatmap(), 3, cfg)
    assert vec is None and scs < 0.6
    vec, _ = select_frame(large_region_heatmap(), 3, cfg, hist)
    assert vec.n == 0 and vec.points == ((0.4, 0.6), (0.41, 0.59))
    assert select_frame(large_region_heatmap(), 4, cfg, hist)[0] is None
    off = RunConfig(history_admits_rejected=False)
    assert select_frame(large_region_heatmap(), 3, off, hist)[0] is None


def test_history_points_follow_peaks():
    hist = HistoricalTrajectories({3: ((0.4, 0.6),)})
    vec, _ = select_frame(point_heatmap(10, 10), 3, RunConfig(), hist)
    assert vec.points == (pixel_to_screen(10, 10, 68, 68), (0.4, 0.6))


# ---------------------------------------------------------------- scripted simulator traces


@pytest.fixture(scope="module")
def sim_corpus(tmp_path_factory):
    def make(name):
        cfg = ScenarioConfig.from_json(SCENARIOS / f"{name}.json")
        out = tmp_path_factory.mktemp(name)
        write_corpus(cfg, out)
        return Corpus(out)

    return make


def test_pose_jump_trace(sim_corpus):
    corpus = sim_corpus("pose_jump")
    session = Session(RunConfig())
    outs = run_events(session, list(corpus.events()))
    head = [w for w in opened(session) if w.trigger is TransformSource.HEAD_MOVE]
    assert [w.t_ms for w in head] == [2000, 4000]
    assert all(w.target_len == 10 for w in head)
    ts = transforms(outs)
    assert [t.source for t in ts] == [TransformSource.INITIAL, TransformSource.HEAD_MOVE, TransformSource.HEAD_MOVE]
    truth = json.loads((corpus.root / "truth.json").read_text())
    offsets = [f["offset"] for f in truth["frames"]]
    for t, frame in zip(ts[1:], (60, 120)):
        # emitted once ten frames after the jump have been accepted
        assert t.computed_at_ms >= corpus.manifest.frames[frame + 10].t_ms
        assert abs(t.dx + offsets[frame][0]) < 0.02 and abs(t.dy + offsets[frame][1]) < 0.02


def test_hard_cut_trace(sim_corpus):
    corpus = sim_corpus("hard_cut")
    session = Session(RunConfig())
    frames = {e.index: corpus.load_frame(e) for e in corpus.manifest.frames}
    assert hamming(phash(frames[29]), phash(frames[30])) > 10
    modes = {}
    for ev in corpus.events():
        session.step(ev)
        if isinstance(ev, FrameArrived):
            modes[ev.frame.index] = session.attention.mode
    cut = [w for w in opened(session) if w.trigger is TransformSource.SCENE_CUT]
    assert [w.t_ms for w in cut] == [1000, 2000, 3000]
    assert all(w.target_len == 5 and w.saliency == "BottomUp" for w in cut)
    for c in (30, 60, 90):
        assert [modes[c + k] for k in range(6)] == [Attention.BOTTOM_UP] * 5 + [Attention.TOP_DOWN]

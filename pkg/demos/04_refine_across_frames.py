"""Calibrate detection confidences by matching them across two frames.

A detector scores the same physical damage differently from frame to
frame. Refinement pairs each detection with its most similar counterpart
in the other frame (cosine similarity of encoder features pooled over the
detection's box) and, for scores inside the calibration window, replaces
the score with the pair average. High-confidence and junk detections are
left alone, and boxes, masks, and labels never change.

Run:  python3 demos/04_refine_across_frames.py
"""

from damast import (
    DetectorNoise,
    RefineConfig,
    VideoSpec,
    compute_ap,
    generate_video,
    init_encoder,
    refine_scores,
    synth_detector,
)


def main():
    spec = VideoSpec(
        image_size=(192, 192),
        num_frames=2,
        frame_rate=2.0,
        drone_velocity=(4.0, 0.0),
        n_buildings=2,
        damages_per_building=2,
        channels=16,
        video_id=1,
        seed=604,
    )
    ds, pyramids = generate_video(spec)
    images = sorted(ds.images, key=lambda im: im.frame_index)
    noise = DetectorNoise(score_jitter=0.15)
    dets_p = synth_detector(ds, images[0].id, noise, seed=904)
    dets_q = synth_detector(ds, images[1].id, noise, seed=904)

    cfg = RefineConfig(params=init_encoder(16, seed=5))
    out_p, out_q, report = refine_scores(dets_p, dets_q, pyramids[0], pyramids[1], cfg)

    print(f"calibration window [{cfg.c0}, {cfg.c1}]; "
          f"{len(dets_p)} + {len(dets_q)} detections in the two frames\n")
    print("frame 0 detections:")
    for det, out, row in zip(dets_p, out_p, report.pairs_p):
        partner = dets_q[row["partner"]]
        moved = "  (calibrated)" if out.score != det.score else ""
        print(f"  {det.class_label:<7} score {det.score:.3f} -> {out.score:.3f}"
              f"   partner score {partner.score:.3f},"
              f" similarity {row['similarity']:.3f}{moved}")
    print("frame 1 detections:")
    for det, out, row in zip(dets_q, out_q, report.pairs_q):
        partner = dets_p[row["partner"]]
        moved = "  (calibrated)" if out.score != det.score else ""
        print(f"  {det.class_label:<7} score {det.score:.3f} -> {out.score:.3f}"
              f"   partner score {partner.score:.3f},"
              f" similarity {row['similarity']:.3f}{moved}")

    before = compute_ap(dets_p + dets_q, ds, "mask").ap
    after = compute_ap(out_p + out_q, ds, "mask").ap
    print(f"\nmask AP before {before:.4f}, after {after:.4f}")
    print("scores inside the window moved to their pair mean; "
          "everything else is untouched.")


if __name__ == "__main__":
    main()

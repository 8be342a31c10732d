"""Score detections with the COCO-style AP evaluator.

The evaluator matches detections to ground truth greedily per class and
image, integrates precision over 101 recall points, and averages over a
sweep of overlap thresholds. Box AP and mask AP come from the same
matcher with different overlap functions, and the size columns restrict
ground truth to the small / medium / large area buckets.

The script runs the noisy oracle detector at three noise levels over a
short video and prints the report for each, so the AP numbers can be read
against a known amount of corruption.

Run:  python3 demos/05_evaluate_detections.py
"""

from damast import (
    DetectorNoise,
    VideoSpec,
    evaluate_both,
    format_ap_report,
    generate_video,
    synth_detector,
)


def main():
    spec = VideoSpec(
        image_size=(256, 192),
        num_frames=4,
        frame_rate=2.0,
        drone_velocity=(4.0, 0.0),
        n_buildings=3,
        damages_per_building=2,
        bucket_weights=(0.6, 0.4, 0.0),
        channels=4,
        video_id=1,
        seed=21,
    )
    ds, _ = generate_video(spec)
    n_damage = sum(1 for i in ds.instances if i.kind == "damage")
    print(f"{len(ds.images)} frames, {n_damage} damage instances\n")

    settings = (
        ("perfect detector", DetectorNoise(0.0, 0.0, 0.0, 0.0)),
        ("mild noise", DetectorNoise(score_jitter=0.1, drop_rate=0.05,
                                     spurious_rate=0.05, box_jitter=1.0)),
        ("heavy noise", DetectorNoise(score_jitter=0.3, drop_rate=0.25,
                                      spurious_rate=0.3, box_jitter=4.0)),
    )
    for label, noise in settings:
        dets = [
            d
            for image in ds.images
            for d in synth_detector(ds, image.id, noise, seed=11)
        ]
        print(f"{label} ({len(dets)} detections):")
        print(format_ap_report(evaluate_both(dets, ds)))
        print()

    print("the mask columns hold up under box jitter because the oracle "
          "masks stay\npinned to the ground truth; the box columns fall as "
          "the boxes drift.")


if __name__ == "__main__":
    main()

"""Why anchor gating uses inner intersection instead of IoU.

Damage marks are small and sit inside much larger building footprints.
Gating candidate anchors by IoU against the building proposals throws
almost all of them away: a 16 px anchor inside a 120 px building overlaps
it nearly completely, yet its IoU is tiny because the union is dominated
by the building. Inner intersection (overlap divided by the anchor's own
area) scores that same anchor at 1.0.

This script builds a scene of large buildings with sub-32 px damages,
takes the anchors that actually cover a damage box, and shows how many
survive each gate at its default threshold.

Run:  python3 demos/02_anchor_gating.py
"""

from damast import (
    AnchorConfig,
    VideoSpec,
    filter_anchors,
    generate_anchors,
    generate_video,
    inner_intersection,
    iou,
)
from damast.pyramid import level_shapes_for


def main():
    spec = VideoSpec(
        image_size=(256, 192),
        num_frames=1,
        frame_rate=2.0,
        drone_velocity=(0.0, 0.0),
        n_buildings=2,
        damages_per_building=3,
        bucket_weights=(1.0, 0.0, 0.0),
        building_size_range=(100.0, 140.0),
        channels=4,
        video_id=1,
        seed=3,
    )
    ds, _ = generate_video(spec)
    image = ds.images[0]
    instances = ds.instances_of_image(image.id)
    buildings = [i.box for i in instances if i.kind == "building"]
    damages = [i.box for i in instances if i.kind == "damage"]

    print("scene:")
    for b in buildings:
        print(f"  building {b.width:.0f}x{b.height:.0f}")
    for d in damages:
        print(f"  damage   {d.width:.0f}x{d.height:.0f}")

    # one concrete anchor, scored both ways against its building
    anchor = damages[0]
    parent = max(buildings, key=lambda b: inner_intersection(anchor, b))
    print(f"\na {anchor.width:.0f}x{anchor.height:.0f} anchor on the first damage:")
    print(f"  iou against its building               {iou(anchor, parent):.4f}")
    print(f"  inner intersection against the same    {inner_intersection(anchor, parent):.4f}")

    anchors = generate_anchors(
        level_shapes_for(spec.image_size), AnchorConfig(), image_size=spec.image_size
    )
    covering = [a for a in anchors if any(iou(a.box, d) >= 0.3 for d in damages)]
    print(f"\n{len(anchors)} dense anchors, {len(covering)} of them cover a damage box")

    for metric in ("iou", "ii"):
        kept, dropped = filter_anchors(covering, buildings, metric)
        rate = len(kept) / len(covering)
        print(f"  gate ({metric:>3}, default threshold): kept {len(kept):>5} "
              f"of {len(covering)}  ({rate:.0%})")

    print("\nthe IoU gate starves the damage head of exactly the anchors it "
          "needs;\nthe inner-intersection gate keeps them.")


if __name__ == "__main__":
    main()

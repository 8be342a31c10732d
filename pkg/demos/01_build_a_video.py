"""Generate a synthetic aerial video and look at what lands on disk.

A VideoSpec pins every knob: image size, frame count, drone motion, how
many buildings carry how much damage, and the seed. From one spec the
generator emits a dataset (video, per-frame images, building and damage
instances) plus one multi-level feature pyramid per frame. The same spec
always reproduces the same bytes, which is what makes the corpus usable
as a regression fixture.

Run:  python3 demos/01_build_a_video.py
"""

from pathlib import Path

from damast import (
    VideoSpec,
    format_size_stats,
    generate_video,
    save_dataset,
    save_pyramid,
    size_stats,
)

OUT = Path(__file__).resolve().parent / "out" / "build_a_video"


def main():
    spec = VideoSpec(
        image_size=(256, 192),
        num_frames=6,
        frame_rate=2.0,
        drone_velocity=(6.0, 0.0),
        n_buildings=4,
        damages_per_building=2,
        bucket_weights=(0.5, 0.3, 0.2),
        channels=8,
        video_id=1,
        seed=7,
    )
    ds, pyramids = generate_video(spec)

    print(f"video {ds.videos[0].id}: {len(ds.images)} frames at "
          f"{ds.videos[0].frame_rate} fps")
    buildings = [i for i in ds.instances if i.kind == "building"]
    damages = [i for i in ds.instances if i.kind == "damage"]
    print(f"instances: {len(buildings)} building boxes, {len(damages)} damages")

    first = ds.images[0]
    print(f"\nframe 0 ({first.width}x{first.height}):")
    for inst in ds.instances_of_image(first.id):
        tag = inst.kind if inst.kind == "building" else f"damage/{inst.scale}"
        x1, y1, x2, y2 = (round(v, 1) for v in inst.box.as_tuple())
        print(f"  {tag:<14} box ({x1}, {y1}) .. ({x2}, {y2})")

    print("\ndamage counts by scale and mask size:")
    print(format_size_stats(size_stats(ds)))

    levels = pyramids[0].levels
    print("\npyramid levels for frame 0 (channels, rows, cols):")
    for stride, level in zip(pyramids[0].strides, levels):
        print(f"  stride {stride:>2}: {level.shape}")

    OUT.mkdir(parents=True, exist_ok=True)
    save_dataset(OUT / "dataset.json", ds)
    save_pyramid(OUT / "frame_0000.msnt", pyramids[0])
    print(f"\nwrote {OUT / 'dataset.json'}")
    print(f"wrote {OUT / 'frame_0000.msnt'} "
          f"({(OUT / 'frame_0000.msnt').stat().st_size} bytes)")


if __name__ == "__main__":
    main()

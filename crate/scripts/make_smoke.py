"""Regenerates data/smoke: synthetic screenshots with labelled UI elements."""
import json
import random
from pathlib import Path

from PIL import Image, ImageDraw

OUT = Path(__file__).resolve().parent.parent / "data" / "smoke"
SIZES = [(1280, 800), (1920, 1080), (1440, 900), (2560, 1440)]
LABELS = ["Save", "Open", "Close", "Export", "Settings", "Search", "Undo", "Share", "Print", "Help"]
GROUPS = ["web", "desktop", "mobile", "creative"]


def main():
    rng = random.Random(7)
    OUT.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in range(5):
        w, h = SIZES[s % len(SIZES)]
        img = Image.new("RGB", (w, h), (236, 239, 244))
        d = ImageDraw.Draw(img)
        d.rectangle([0, 0, w, 48], fill=(52, 61, 79))
        d.rectangle([0, 48, 220, h], fill=(216, 222, 233))
        elements = []
        for k in range(4):
            bw, bh = rng.randint(48, 160), rng.randint(24, 44)
            x = rng.randint(240, w - bw - 20)
            y = rng.randint(70, h - bh - 20)
            ui = "icon" if k % 2 else "text"
            fill = (94, 129, 172) if ui == "text" else (191, 97, 106)
            d.rectangle([x, y, x + bw, y + bh], fill=fill, outline=(46, 52, 64))
            label = LABELS[(s * 4 + k) % len(LABELS)]
            if ui == "text":
                d.text((x + 6, y + bh // 2 - 6), label, fill=(255, 255, 255))
            elements.append((label, ui, [x, y, x + bw, y + bh]))
        name = f"screen_{s:02d}.png"
        img.save(OUT / name, optimize=True)
        for k, (label, ui, box) in enumerate(elements):
            verb = "click" if ui == "text" else "tap the icon for"
            rows.append({
                "id": f"smoke-{s:02d}-{k}",
                "image": name,
                "instruction": f"{verb} {label.lower()}",
                "bbox": box,
                "group": GROUPS[s % len(GROUPS)],
                "ui_type": ui,
            })
    with open(OUT / "smoke.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")


if __name__ == "__main__":
    main()

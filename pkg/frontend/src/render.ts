/** Grayscale canvas painting; invalid pixels are tinted so out-of-volume
 * states are obvious while recording. */

import { RenderedFrame } from "./api.js";

const INVALID_TINT = { r: 70, g: 28, b: 28 };

export function frameToImageData(frame: RenderedFrame): ImageData {
  const { pixels, valid, h, w } = frame;
  const img = new ImageData(w, h);
  for (let i = 0; i < h * w; i++) {
    const o = i * 4;
    if (valid[i]) {
      const v = Math.max(0, Math.min(255, Math.round(pixels[i] * 255)));
      img.data[o] = v;
      img.data[o + 1] = v;
      img.data[o + 2] = v;
    } else {
      img.data[o] = INVALID_TINT.r;
      img.data[o + 1] = INVALID_TINT.g;
      img.data[o + 2] = INVALID_TINT.b;
    }
    img.data[o + 3] = 255;
  }
  return img;
}

export function paintFrame(canvas: HTMLCanvasElement, frame: RenderedFrame): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const img = frameToImageData(frame);
  // draw at native resolution on an offscreen canvas, then scale up
  const off = document.createElement("canvas");
  off.width = frame.w;
  off.height = frame.h;
  off.getContext("2d")!.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

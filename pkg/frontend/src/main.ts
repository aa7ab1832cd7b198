/** DOM wiring: volume picker, 8 action sliders, live canvas, record/replay. */

import { ACTION_DIM, ApiClient } from "./api.js";
import { paintFrame } from "./render.js";
import { ACTION_LABELS, RecorderSession } from "./session.js";

const api = new ApiClient("");
let session: RecorderSession | null = null;

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

function setStatus(connected: boolean, message: string): void {
  const banner = $("status");
  banner.textContent = connected ? "" : `server unreachable: ${message}`;
  banner.style.display = connected ? "none" : "block";
  document.querySelectorAll("input, button, select").forEach((el) => {
    (el as HTMLInputElement).disabled = !connected && el.id !== "reload";
  });
}

function buildSliders(onInput: (i: number, v: number) => void): void {
  const host = $("sliders");
  host.innerHTML = "";
  for (let i = 0; i < ACTION_DIM; i++) {
    const row = document.createElement("div");
    row.className = "slider-row";
    const label = document.createElement("label");
    label.textContent = ACTION_LABELS[i];
    const input = document.createElement("input");
    input.type = "range";
    input.min = "-1";
    input.max = "1";
    input.step = "0.01";
    input.value = "0";
    input.id = `slider-${i}`;
    const value = document.createElement("span");
    value.id = `value-${i}`;
    value.textContent = "0.00";
    input.addEventListener("input", () => {
      const v = parseFloat(input.value);
      value.textContent = v.toFixed(2);
      onInput(i, v);
    });
    row.append(label, input, value);
    host.append(row);
  }
}

async function start(): Promise<void> {
  try {
    const listing = await api.volumes();
    const picker = $("volume") as unknown as HTMLSelectElement;
    picker.innerHTML = "";
    for (const vol of listing.volumes) {
      const opt = document.createElement("option");
      opt.value = vol.id;
      opt.textContent = `${vol.id} (${vol.dims.join("x")})`;
      picker.append(opt);
    }
    attachSession(picker.value);
    picker.addEventListener("change", () => attachSession(picker.value));
    setStatus(true, "");
  } catch (err) {
    setStatus(false, String(err));
  }
}

function attachSession(volumeId: string): void {
  session = new RecorderSession(api, volumeId, {
    onFrame: (frame) => paintFrame($("view") as HTMLCanvasElement, frame),
    onStatus: setStatus,
    onRecordedChange: (count) => {
      $("recorded-count").textContent = String(count);
    },
  });
  buildSliders((i, v) => session!.setComponent(i, v));
  session.scheduleRender();
}

function wireButtons(): void {
  $("record").addEventListener("click", () => void session?.recordFrame());
  const auto = $("auto") as unknown as HTMLInputElement;
  auto.addEventListener("change", () => {
    if (!session) return;
    if (auto.checked) session.startAutoRecord(250);
    else session.stopAutoRecord();
  });
  $("replay").addEventListener("click", () => {
    void session?.replay(
      (frame) => paintFrame($("view") as HTMLCanvasElement, frame), 120);
  });
  $("finish").addEventListener("click", async () => {
    if (!session) return;
    try {
      const result = await session.finish();
      $("finish-info").textContent =
        `saved ${result.length} frames to ${result.path}`;
    } catch (err) {
      $("finish-info").textContent = String(err);
    }
  });
  $("reload").addEventListener("click", () => void start());
}

wireButtons();
void start();

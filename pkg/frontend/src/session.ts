/** Recorder session state machine, framework-free so tests can drive it
 * headlessly. The DOM layer only forwards slider events here.
 *
 * Invariants: the current action is always clamped to [-1, 1]^8; the
 * recorded list is append-only until finish; every recorded action goes to
 * the server exactly as displayed (no client-side geometry).
 */

import { ACTION_DIM, ActionVector, ApiClient, RenderedFrame } from "./api.js";

export const ACTION_LABELS = [
  "p_x", "p_y", "p_z", "r_pitch", "r_yaw", "r_roll", "s_x", "s_z",
] as const;

const clamp = (v: number) => Math.max(-1, Math.min(1, v));

export interface SessionEvents {
  onFrame?: (frame: RenderedFrame) => void;
  onStatus?: (connected: boolean, message: string) => void;
  onRecordedChange?: (count: number) => void;
}

export class RecorderSession {
  current: ActionVector = new Array(ACTION_DIM).fill(0);
  recorded: ActionVector[] = [];
  /** frames served while recording, kept for the bit-exact replay check */
  recordedFrames: Float32Array[] = [];
  finished = false;
  trajId: string | null = null;

  private renderTimer: ReturnType<typeof setTimeout> | null = null;
  private renderInFlight = false;
  private renderQueued = false;
  private autoTimer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private api: ApiClient,
    public volumeId: string,
    private events: SessionEvents = {},
    private debounceMs = 80,
  ) {}

  /** Clamp-and-set one component; triggers a debounced live render. */
  setComponent(index: number, value: number): void {
    this.current[index] = clamp(value);
    this.scheduleRender();
  }

  setAction(action: ActionVector): void {
    this.current = action.map(clamp);
    this.scheduleRender();
  }

  /** Debounced, latest-wins live rendering (never more than one in flight). */
  scheduleRender(): void {
    if (this.renderTimer !== null) clearTimeout(this.renderTimer);
    this.renderTimer = setTimeout(() => {
      this.renderTimer = null;
      void this.renderNow();
    }, this.debounceMs);
  }

  async renderNow(): Promise<RenderedFrame | null> {
    if (this.renderInFlight) {
      this.renderQueued = true;
      return null;
    }
    this.renderInFlight = true;
    try {
      const frame = await this.api.render(this.volumeId, [...this.current]);
      this.events.onFrame?.(frame);
      this.events.onStatus?.(true, "connected");
      return frame;
    } catch (err) {
      this.events.onStatus?.(false, String(err));
      return null;
    } finally {
      this.renderInFlight = false;
      if (this.renderQueued) {
        this.renderQueued = false;
        void this.renderNow();
      }
    }
  }

  private async ensureStarted(): Promise<string> {
    if (this.trajId === null) {
      this.trajId = await this.api.trajStart(this.volumeId);
    }
    return this.trajId;
  }

  /** Append the current action (and the frame the server renders for it). */
  async recordFrame(): Promise<number> {
    if (this.finished) throw new Error("session already finished");
    const trajId = await this.ensureStarted();
    const action = [...this.current];
    const length = await this.api.trajAppend(trajId, action);
    const frame = await this.api.render(this.volumeId, action);
    this.recorded.push(action);
    this.recordedFrames.push(frame.pixels);
    this.events.onFrame?.(frame);
    this.events.onRecordedChange?.(this.recorded.length);
    return length;
  }

  /** Auto-record at a fixed cadence while the user drags controls. */
  startAutoRecord(intervalMs = 250): void {
    if (this.autoTimer !== null) return;
    this.autoTimer = setInterval(() => void this.recordFrame(), intervalMs);
  }

  stopAutoRecord(): void {
    if (this.autoTimer !== null) {
      clearInterval(this.autoTimer);
      this.autoTimer = null;
    }
  }

  async finish(): Promise<{ path: string; length: number }> {
    if (this.finished) throw new Error("session already finished");
    if (this.trajId === null) throw new Error("nothing recorded");
    this.stopAutoRecord();
    const result = await this.api.trajFinish(this.trajId);
    this.finished = true;
    return result;
  }

  /** Replay the recording: one /render call per recorded action. */
  async replay(onFrame: (frame: RenderedFrame, index: number) => void,
               delayMs = 0): Promise<number> {
    let calls = 0;
    for (let i = 0; i < this.recorded.length; i++) {
      const frame = await this.api.render(this.volumeId, [...this.recorded[i]]);
      calls += 1;
      onFrame(frame, i);
      if (delayMs > 0) await new Promise((r) => setTimeout(r, delayMs));
    }
    return calls;
  }
}

/** Typed client for the slicenav render/record service. */

export const ACTION_DIM = 8;

export type ActionVector = number[]; // length 8, components in [-1, 1]

export interface VolumeInfo {
  id: string;
  dims: [number, number, number];
}

export interface VolumesResponse {
  volumes: VolumeInfo[];
  render: { out_h: number; out_w: number };
}

export interface RenderedFrame {
  pixels: Float32Array; // length h*w, row-major
  valid: Uint8Array;
  h: number;
  w: number;
}

export interface ServiceError {
  error: string;
  message: string;
  field?: string;
}

export class ApiError extends Error {
  constructor(public status: number, public body: ServiceError) {
    super(`${body.error}: ${body.message}`);
  }
}

function decodeBase64(data: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(data);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  // node (vitest) path
  return new Uint8Array(Buffer.from(data, "base64"));
}

export function decodePixels(b64: string): Float32Array {
  const bytes = decodeBase64(b64);
  return new Float32Array(bytes.buffer, bytes.byteOffset, bytes.byteLength / 4);
}

export function decodeValid(b64: string): Uint8Array {
  return decodeBase64(b64);
}

export class ApiClient {
  constructor(private baseUrl: string) {}

  private async post<T>(path: string, payload: unknown): Promise<T> {
    const resp = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
    const body = await resp.json();
    if (!resp.ok) throw new ApiError(resp.status, body as ServiceError);
    return body as T;
  }

  async volumes(): Promise<VolumesResponse> {
    const resp = await fetch(this.baseUrl + "/volumes");
    const body = await resp.json();
    if (!resp.ok) throw new ApiError(resp.status, body as ServiceError);
    return body as VolumesResponse;
  }

  /** Pure server-side render; the client never transforms action values. */
  async render(volumeId: string, action: ActionVector,
               out?: [number, number]): Promise<RenderedFrame> {
    const body = await this.post<{ pixels_b64: string; valid_b64: string;
                                   h: number; w: number }>(
      "/render", { volume_id: volumeId, action, ...(out ? { out } : {}) });
    return {
      pixels: decodePixels(body.pixels_b64),
      valid: decodeValid(body.valid_b64),
      h: body.h,
      w: body.w,
    };
  }

  async trajStart(volumeId: string, subjectId?: string): Promise<string> {
    const body = await this.post<{ traj_id: string }>(
      "/traj/start", { volume_id: volumeId, ...(subjectId ? { subject_id: subjectId } : {}) });
    return body.traj_id;
  }

  async trajAppend(trajId: string, action: ActionVector): Promise<number> {
    const body = await this.post<{ length: number }>(
      "/traj/append", { traj_id: trajId, action });
    return body.length;
  }

  async trajFinish(trajId: string): Promise<{ path: string; length: number }> {
    return this.post("/traj/finish", { traj_id: trajId });
  }
}

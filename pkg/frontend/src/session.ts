// Live stream session: pairs frame-meta messages with their binary frames,
// drops stale frames via the monotone gate, and retries a failed send once
// before surfacing a disconnect.

import { DisplayGate } from './monotone.js'
import {
  ControlState,
  ErrorMsg,
  FrameMeta,
  decodeFrame,
  parseServerText,
} from './protocol.js'

export interface PlaybackCmd {
  type: 'playback'
  seq: number
  driving_id: string
  action: 'start' | 'pause' | 'seek'
  index?: number
}

export interface FrameEvent {
  meta: FrameMeta
  seq: number
  width: number
  height: number
  rgb: Uint8Array
}

export interface SessionHooks {
  onFrame(ev: FrameEvent): void
  onError(err: ErrorMsg): void
  onDisconnect(reason: string): void
}

export interface SocketLike {
  send(data: string): void
  close(): void
}

export class StreamSession {
  readonly gate = new DisplayGate()
  private pendingMeta: FrameMeta | null = null
  private retried = false

  constructor(private readonly socket: SocketLike, private readonly hooks: SessionHooks) {}

  async handleMessage(data: string | ArrayBuffer): Promise<void> {
    if (typeof data === 'string') {
      const msg = parseServerText(data)
      if (msg.type === 'error') {
        this.hooks.onError(msg)
        return
      }
      this.pendingMeta = msg
      return
    }
    const meta = this.pendingMeta
    this.pendingMeta = null
    const frame = await decodeFrame(data)
    if (!this.gate.offer(frame.seq)) return
    this.hooks.onFrame({
      meta: meta ?? { type: 'frame_meta', seq: frame.seq, encoding: 'zlib-rgb8' },
      seq: frame.seq,
      width: frame.width,
      height: frame.height,
      rgb: frame.rgb,
    })
  }

  send(msg: ControlState | PlaybackCmd): void {
    try {
      this.socket.send(JSON.stringify(msg))
      this.retried = false
    } catch (err) {
      if (this.retried) {
        this.hooks.onDisconnect(`send failed twice: ${err}`)
        return
      }
      this.retried = true
      setTimeout(() => this.send(msg), 100)
    }
  }

  close(): void {
    this.socket.close()
  }
}

/** RGB8 rows to RGBA for a canvas ImageData buffer. */
export function rgbToRgba(rgb: Uint8Array, width: number, height: number): Uint8ClampedArray<ArrayBuffer> {
  const out = new Uint8ClampedArray(new ArrayBuffer(width * height * 4))
  for (let i = 0, j = 0; i < rgb.length; i += 3, j += 4) {
    out[j] = rgb[i]
    out[j + 1] = rgb[i + 1]
    out[j + 2] = rgb[i + 2]
    out[j + 3] = 255
  }
  return out
}

// Wire types and codecs for the avatar service stream.
//
// Control states go out as JSON text; each rendered frame comes back as a
// JSON meta message followed by one binary message:
//   u64 seq | u32 height | u32 width | zlib-compressed RGB8 payload

export interface EditRef {
  name: string
  strength: number
}

export interface ControlState {
  seq: number
  yaw: number
  pitch: number
  jaw: number[]
  expr: number[]
  edits: EditRef[]
}

export interface FrameMeta {
  type: 'frame_meta'
  seq: number
  encoding: string
  state?: ControlState
  playback_index?: number
  driving_id?: string
  alpha?: number[]
}

export interface ErrorMsg {
  type: 'error'
  detail: string
  seq?: number | null
}

export type ServerMsg = FrameMeta | ErrorMsg

export const EXPR_DIMS = 50
export const JAW_DIMS = 3
export const FRAME_HEADER_BYTES = 16

export function neutralState(seq: number): ControlState {
  return {
    seq,
    yaw: 0,
    pitch: 0,
    jaw: new Array(JAW_DIMS).fill(0),
    expr: new Array(EXPR_DIMS).fill(0),
    edits: [],
  }
}

export interface RawFrame {
  seq: number
  height: number
  width: number
  payload: Uint8Array
}

export function parseFrameHeader(buf: ArrayBuffer): RawFrame {
  if (buf.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${buf.byteLength} bytes`)
  }
  const view = new DataView(buf)
  const seq = Number(view.getBigUint64(0, true))
  const height = view.getUint32(8, true)
  const width = view.getUint32(12, true)
  return { seq, height, width, payload: new Uint8Array(buf, FRAME_HEADER_BYTES) }
}

/** Inflate the zlib payload into raw RGB8 bytes (h*w*3). */
export async function inflatePayload(payload: Uint8Array): Promise<Uint8Array> {
  if (typeof DecompressionStream !== 'undefined') {
    const stream = new Blob([payload as BlobPart]).stream().pipeThrough(new DecompressionStream('deflate'))
    const buf = await new Response(stream).arrayBuffer()
    return new Uint8Array(buf)
  }
  // node (tests): fall back to zlib
  const zlib = await import('node:zlib')
  return new Uint8Array(zlib.inflateSync(payload))
}

export async function decodeFrame(buf: ArrayBuffer): Promise<{ seq: number; height: number; width: number; rgb: Uint8Array }> {
  const raw = parseFrameHeader(buf)
  const rgb = await inflatePayload(raw.payload)
  if (rgb.length !== raw.height * raw.width * 3) {
    throw new Error(`payload size ${rgb.length} does not match ${raw.height}x${raw.width}x3`)
  }
  return { seq: raw.seq, height: raw.height, width: raw.width, rgb }
}

export function parseServerText(text: string): ServerMsg {
  const msg = JSON.parse(text)
  if (msg.type !== 'frame_meta' && msg.type !== 'error') {
    throw new Error(`unexpected server message type ${msg.type}`)
  }
  return msg as ServerMsg
}

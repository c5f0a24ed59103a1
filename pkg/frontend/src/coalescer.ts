// Coalesces rapid slider motion into rate-capped control sends.
//
// Partial updates merge into one pending state; sends happen at most once
// per interval (default ~30 Hz) and each send bumps the sequence number.

import { ControlState, EditRef, neutralState } from './protocol.js'

export type PartialControl = Partial<Omit<ControlState, 'seq'>>

interface Clock {
  now(): number
  schedule(fn: () => void, ms: number): unknown
  cancel(handle: unknown): void
}

const realClock: Clock = {
  now: () => Date.now(),
  schedule: (fn, ms) => setTimeout(fn, ms),
  cancel: (h) => clearTimeout(h as ReturnType<typeof setTimeout>),
}

export class ControlCoalescer {
  private state: Omit<ControlState, 'seq'>
  private seq = 0
  private dirty = false
  private lastSendAt = Number.NEGATIVE_INFINITY
  private timer: unknown = null

  constructor(
    private readonly send: (state: ControlState) => void,
    private readonly minIntervalMs = 33,
    private readonly clock: Clock = realClock,
  ) {
    const { seq: _seq, ...rest } = neutralState(0)
    this.state = rest
  }

  get lastSentSeq(): number {
    return this.seq
  }

  get current(): Omit<ControlState, 'seq'> {
    return {
      ...this.state,
      jaw: [...this.state.jaw],
      expr: [...this.state.expr],
      edits: this.state.edits.map((e) => ({ ...e })),
    }
  }

  /** Merge a partial update; unspecified fields keep their last value. */
  update(partial: PartialControl): void {
    if (partial.yaw !== undefined) this.state.yaw = partial.yaw
    if (partial.pitch !== undefined) this.state.pitch = partial.pitch
    if (partial.jaw !== undefined) this.state.jaw = [...partial.jaw]
    if (partial.expr !== undefined) this.state.expr = [...partial.expr]
    if (partial.edits !== undefined) this.state.edits = partial.edits.map((e) => ({ ...e }))
    this.dirty = true
    this.pump()
  }

  setExprDim(index: number, value: number): void {
    const expr = [...this.state.expr]
    expr[index] = value
    this.update({ expr })
  }

  setEditStrength(name: string, strength: number): void {
    const edits: EditRef[] = this.state.edits.filter((e) => e.name !== name)
    edits.push({ name, strength })
    this.update({ edits })
  }

  /** Fresh monotone sequence after a reconnect. */
  reset(): void {
    this.seq = 0
    this.dirty = false
    this.lastSendAt = Number.NEGATIVE_INFINITY
    if (this.timer !== null) {
      this.clock.cancel(this.timer)
      this.timer = null
    }
  }

  /** Force the current state out immediately (initial frame, tests). */
  flush(): void {
    this.sendNow()
  }

  private pump(): void {
    if (!this.dirty || this.timer !== null) return
    const wait = this.minIntervalMs - (this.clock.now() - this.lastSendAt)
    if (wait <= 0) {
      this.sendNow()
    } else {
      this.timer = this.clock.schedule(() => {
        this.timer = null
        if (this.dirty) this.sendNow()
      }, wait)
    }
  }

  private sendNow(): void {
    this.seq += 1
    this.dirty = false
    this.lastSendAt = this.clock.now()
    this.send({ seq: this.seq, ...this.current })
  }
}

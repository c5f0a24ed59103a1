// View-layer guard: the panel never shows a frame older than one already shown.

export class DisplayGate {
  private lastShown = 0

  get lastShownSeq(): number {
    return this.lastShown
  }

  /** Returns true when the frame may be displayed; stale frames are dropped. */
  offer(seq: number): boolean {
    if (seq < this.lastShown) return false
    this.lastShown = seq
    return true
  }

  reset(): void {
    this.lastShown = 0
  }
}

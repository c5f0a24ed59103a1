// Panel settings persisted to localStorage, keyed per avatar: edit strengths
// plus slider values, so a reload restores the exact same render request.

export interface PanelSettings {
  strengths: Record<string, number>
  yaw: number
  pitch: number
  expr: number[]
}

export const DEFAULT_SETTINGS: PanelSettings = {
  strengths: {},
  yaw: 0,
  pitch: 0,
  expr: new Array(50).fill(0),
}

type StorageLike = Pick<Storage, 'getItem' | 'setItem'>

export class SettingsStore {
  constructor(private readonly storage: StorageLike, private readonly prefix = 'pvp-panel') {}

  private key(avatarId: string): string {
    return `${this.prefix}:${avatarId}`
  }

  load(avatarId: string): PanelSettings {
    const raw = this.storage.getItem(this.key(avatarId))
    if (!raw) return structuredClone(DEFAULT_SETTINGS)
    try {
      const parsed = JSON.parse(raw)
      return {
        strengths: parsed.strengths ?? {},
        yaw: parsed.yaw ?? 0,
        pitch: parsed.pitch ?? 0,
        expr: Array.isArray(parsed.expr) && parsed.expr.length === 50
          ? parsed.expr
          : new Array(50).fill(0),
      }
    } catch {
      return structuredClone(DEFAULT_SETTINGS)
    }
  }

  save(avatarId: string, settings: PanelSettings): void {
    this.storage.setItem(this.key(avatarId), JSON.stringify(settings))
  }
}

// Thin REST client for the avatar service (the panel's only data source).

export interface AvatarRecord {
  id: string
  state: string
  n_frames: number
}

export interface DirectionInfo {
  name: string
  layers: number
  dim: number
  strength_range: [number, number]
}

export interface PivotInfo {
  index: number
  frame_index: number
  yaw: number
  pitch: number
}

export class ApiClient {
  constructor(readonly baseUrl: string) {}

  private async get<T>(path: string): Promise<T> {
    const resp = await fetch(`${this.baseUrl}${path}`)
    if (!resp.ok) throw new Error(`${path}: ${resp.status} ${await resp.text()}`)
    return (await resp.json()) as T
  }

  avatars(): Promise<AvatarRecord[]> {
    return this.get('/avatars')
  }

  avatar(id: string): Promise<AvatarRecord> {
    return this.get(`/avatars/${id}`)
  }

  directions(id: string): Promise<DirectionInfo[]> {
    return this.get(`/avatars/${id}/directions`)
  }

  pivots(id: string): Promise<PivotInfo[]> {
    return this.get(`/avatars/${id}/pivots`)
  }

  drivingIds(id: string): Promise<string[]> {
    return this.get<{ driving_ids: string[] }>(`/avatars/${id}/driving`).then((d) => d.driving_ids)
  }

  streamUrl(id: string, opts: { debug?: boolean } = {}): string {
    const ws = this.baseUrl.replace(/^http/, 'ws')
    return `${ws}/avatars/${id}/stream${opts.debug ? '?debug=1' : ''}`
  }
}

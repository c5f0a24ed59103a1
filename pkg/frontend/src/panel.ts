// The control panel: sliders and dials feed the coalescer, the stream session
// paints returned frames, and the transport drives server-side playback.

import { ApiClient, DirectionInfo, PivotInfo } from './api.js'
import { ControlCoalescer } from './coalescer.js'
import { SettingsStore } from './palette.js'
import { ControlState, EditRef, FrameMeta } from './protocol.js'
import { FrameEvent, StreamSession, rgbToRgba } from './session.js'

export const YAW_RANGE = 90
export const PITCH_RANGE = 30
const VISIBLE_EXPR_DIALS = 10

export class Panel {
  private session: StreamSession | null = null
  private coalescer: ControlCoalescer | null = null
  private avatarId = ''
  private playbackSeq = 1000000 // playback commands use their own counter
  private settings = new SettingsStore(window.localStorage)
  private strengths: Record<string, number> = {}

  constructor(private readonly root: HTMLElement, private readonly api: ApiClient) {}

  async connect(avatarId: string, debug = false): Promise<void> {
    const record = await this.api.avatar(avatarId)
    if (record.state !== 'ready') {
      throw new Error(`avatar ${avatarId} is not ready (state ${record.state})`)
    }
    this.avatarId = avatarId
    const saved = this.settings.load(avatarId)
    this.strengths = { ...saved.strengths }

    const socket = new WebSocket(this.api.streamUrl(avatarId, { debug }))
    socket.binaryType = 'arraybuffer'
    this.session = new StreamSession(socket, {
      onFrame: (ev) => this.paint(ev),
      onError: (err) => this.status(`server error: ${err.detail}`),
      onDisconnect: (reason) => this.status(`disconnected: ${reason}`),
    })
    socket.onmessage = (ev) => void this.session?.handleMessage(ev.data)
    socket.onclose = () => this.status('stream closed')

    this.coalescer = new ControlCoalescer((state) => this.sendState(state))
    this.render(await this.api.directions(avatarId), await this.api.pivots(avatarId),
                await this.api.drivingIds(avatarId))
    this.coalescer.update({
      yaw: saved.yaw,
      pitch: saved.pitch,
      expr: saved.expr,
      edits: this.editList(),
    })
    await new Promise<void>((resolve, reject) => {
      socket.onopen = () => resolve()
      socket.onerror = () => reject(new Error('connection refused'))
      if (socket.readyState === WebSocket.OPEN) resolve()
    })
    this.coalescer.flush() // initial frame
  }

  private sendState(state: ControlState): void {
    this.session?.send(state)
    this.persist(state)
  }

  private persist(state: ControlState): void {
    this.settings.save(this.avatarId, {
      strengths: { ...this.strengths },
      yaw: state.yaw,
      pitch: state.pitch,
      expr: [...state.expr],
    })
  }

  private editList(): EditRef[] {
    return Object.entries(this.strengths).map(([name, strength]) => ({ name, strength }))
  }

  private paint(ev: FrameEvent): void {
    const canvas = this.root.querySelector<HTMLCanvasElement>('#frame')
    if (!canvas) return
    canvas.width = ev.width
    canvas.height = ev.height
    const ctx = canvas.getContext('2d')
    if (!ctx) return
    ctx.putImageData(new ImageData(rgbToRgba(ev.rgb, ev.width, ev.height), ev.width, ev.height), 0, 0)
    this.updateMetaInfo(ev.meta)
  }

  private updateMetaInfo(meta: FrameMeta): void {
    const info = this.root.querySelector('#frame-info')
    if (info) {
      const idx = meta.playback_index !== undefined ? ` frame ${meta.playback_index}` : ''
      info.textContent = `seq ${meta.seq}${idx}`
    }
    const idxSlider = this.root.querySelector<HTMLInputElement>('#playback-pos')
    if (idxSlider && meta.playback_index !== undefined) {
      idxSlider.value = String(meta.playback_index)
    }
    const alphaBox = this.root.querySelector('#alpha-debug')
    if (alphaBox instanceof HTMLElement && meta.alpha) {
      alphaBox.textContent = meta.alpha.map((a) => a.toFixed(3)).join(' ')
    }
  }

  private status(text: string): void {
    const el = this.root.querySelector('#status')
    if (el) el.textContent = text
  }

  // -- DOM -----------------------------------------------------------------

  private render(directions: DirectionInfo[], pivots: PivotInfo[], drivingIds: string[]): void {
    const c = this.coalescer!
    this.root.innerHTML = `
      <div class="panel">
        <div class="view">
          <canvas id="frame" width="64" height="64"></canvas>
          <div id="frame-info"></div>
          <div id="status"></div>
          <label class="debug"><input type="checkbox" id="alpha-toggle"> blend weights</label>
          <pre id="alpha-debug" hidden></pre>
        </div>
        <div class="controls">
          <fieldset id="pose">
            <legend>pose</legend>
            <label>yaw <input type="range" id="yaw" min="${-YAW_RANGE}" max="${YAW_RANGE}" step="0.5" value="0">
              <span id="yaw-val">0</span></label>
            <label>pitch <input type="range" id="pitch" min="${-PITCH_RANGE}" max="${PITCH_RANGE}" step="0.5" value="0">
              <span id="pitch-val">0</span></label>
          </fieldset>
          <fieldset id="jaw">
            <legend>jaw</legend>
            ${[0, 1, 2].map((j) => `
              <label>j${j} <input type="range" class="jaw-dial" data-dim="${j}"
                min="-0.5" max="0.5" step="0.01" value="0"></label>`).join('')}
          </fieldset>
          <fieldset id="expression">
            <legend>expression</legend>
            <div id="expr-main"></div>
            <details><summary>advanced (40 more)</summary><div id="expr-advanced"></div></details>
          </fieldset>
          <fieldset id="edits">
            <legend>edits</legend>
            <div id="edit-list"></div>
          </fieldset>
          <fieldset id="gallery">
            <legend>pivots</legend>
            <div id="pivot-list"></div>
          </fieldset>
          <fieldset id="playback">
            <legend>playback</legend>
            <select id="driving-select">${drivingIds.map((d) => `<option>${d}</option>`).join('')}</select>
            <button id="play">play</button>
            <button id="pause">pause</button>
            <label>scrub <input type="range" id="playback-pos" min="0" max="599" step="1" value="0"></label>
          </fieldset>
        </div>
      </div>`

    const saved = this.settings.load(this.avatarId)

    const yaw = this.root.querySelector<HTMLInputElement>('#yaw')!
    const pitch = this.root.querySelector<HTMLInputElement>('#pitch')!
    yaw.value = String(Math.max(-YAW_RANGE, Math.min(YAW_RANGE, saved.yaw)))
    pitch.value = String(Math.max(-PITCH_RANGE, Math.min(PITCH_RANGE, saved.pitch)))
    const showPose = () => {
      this.root.querySelector('#yaw-val')!.textContent = yaw.value
      this.root.querySelector('#pitch-val')!.textContent = pitch.value
    }
    showPose()
    yaw.oninput = () => {
      showPose()
      c.update({ yaw: Number(yaw.value) })
    }
    pitch.oninput = () => {
      showPose()
      c.update({ pitch: Number(pitch.value) })
    }

    this.root.querySelectorAll<HTMLInputElement>('.jaw-dial').forEach((dial) => {
      dial.oninput = () => {
        const jaw = [...c.current.jaw]
        jaw[Number(dial.dataset.dim)] = Number(dial.value)
        c.update({ jaw })
      }
    })

    const main = this.root.querySelector('#expr-main')!
    const advanced = this.root.querySelector('#expr-advanced')!
    for (let i = 0; i < 50; i++) {
      const label = document.createElement('label')
      label.innerHTML = `x${i} <input type="range" min="-2" max="2" step="0.02" value="${saved.expr[i] ?? 0}">`
      const input = label.querySelector('input')!
      input.oninput = () => c.setExprDim(i, Number(input.value))
      ;(i < VISIBLE_EXPR_DIALS ? main : advanced).appendChild(label)
    }

    const editList = this.root.querySelector('#edit-list')!
    for (const dir of directions) {
      const [lo, hi] = dir.strength_range
      const label = document.createElement('label')
      const start = this.strengths[dir.name] ?? 0
      label.innerHTML = `${dir.name} <input type="range" min="${lo}" max="${hi}" step="0.05" value="${start}">
        <span class="strength">${start.toFixed(2)}</span>`
      const input = label.querySelector('input')!
      input.oninput = () => {
        this.strengths[dir.name] = Number(input.value)
        label.querySelector('.strength')!.textContent = Number(input.value).toFixed(2)
        c.update({ edits: this.editList() })
      }
      editList.appendChild(label)
    }

    const pivotList = this.root.querySelector('#pivot-list')!
    for (const p of pivots) {
      const btn = document.createElement('button')
      btn.textContent = `#${p.frame_index} (${p.yaw.toFixed(0)}, ${p.pitch.toFixed(0)})`
      btn.onclick = () => {
        yaw.value = String(Math.max(-YAW_RANGE, Math.min(YAW_RANGE, p.yaw)))
        pitch.value = String(Math.max(-PITCH_RANGE, Math.min(PITCH_RANGE, p.pitch)))
        showPose()
        c.update({ yaw: Number(yaw.value), pitch: Number(pitch.value) })
      }
      pivotList.appendChild(btn)
    }

    const drivingSelect = this.root.querySelector<HTMLSelectElement>('#driving-select')!
    const playbackCmd = (action: 'start' | 'pause' | 'seek', index = 0) => {
      if (!drivingSelect.value) return
      this.session?.send({
        type: 'playback', seq: this.playbackSeq++, driving_id: drivingSelect.value,
        action, index,
      })
    }
    this.root.querySelector<HTMLButtonElement>('#play')!.onclick = () => playbackCmd('start')
    this.root.querySelector<HTMLButtonElement>('#pause')!.onclick = () => playbackCmd('pause')
    const pos = this.root.querySelector<HTMLInputElement>('#playback-pos')!
    pos.onchange = () => playbackCmd('seek', Number(pos.value))

    const toggle = this.root.querySelector<HTMLInputElement>('#alpha-toggle')!
    const alphaBox = this.root.querySelector<HTMLElement>('#alpha-debug')!
    toggle.onchange = () => {
      alphaBox.hidden = !toggle.checked
    }
  }
}

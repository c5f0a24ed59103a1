import { ApiClient } from './api.js'
import { Panel } from './panel.js'

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search)
  const base = params.get('api') ?? `${window.location.protocol}//${window.location.host}`
  const api = new ApiClient(base)
  const root = document.getElementById('app')!
  const picker = document.getElementById('picker')!

  const avatars = (await api.avatars()).filter((a) => a.state === 'ready')
  if (avatars.length === 0) {
    picker.textContent = 'no ready avatars on this server'
    return
  }
  picker.innerHTML = `
    <select id="avatar-select">${avatars.map((a) => `<option>${a.id}</option>`).join('')}</select>
    <label><input type="checkbox" id="debug-mode"> debug</label>
    <button id="connect">connect</button>
    <span id="picker-status"></span>`
  const status = document.getElementById('picker-status')!
  document.getElementById('connect')!.onclick = async () => {
    const id = (document.getElementById('avatar-select') as HTMLSelectElement).value
    const debug = (document.getElementById('debug-mode') as HTMLInputElement).checked
    status.textContent = 'connecting...'
    try {
      await new Panel(root, api).connect(id, debug)
      status.textContent = ''
    } catch (err) {
      status.textContent = `${err}`
    }
  }
}

void boot()

// DOM layer: wires the pure state module to the review-server API.

import { ApiError, fetchItem, fetchItems, submitItem } from './api.js';
import {
  UiReviewState,
  ReviewItem,
  buildSubmit,
  debounce,
  emptyState,
  isDirty,
  loadItem,
  movePoint,
  overlayUrl,
  queueView,
  resetPoints,
  rollback,
  SubmitAction,
} from './state.js';

const ZOOM = 3; // displayed pixels per image pixel

let state: UiReviewState = emptyState();
let queue: ReviewItem[] = [];

const el = {
  banner: byId('banner'),
  queue: byId('queue'),
  stage: byId('stage'),
  overlay: byId('overlay') as HTMLImageElement,
  markers: byId('markers'),
  meta: byId('meta'),
  buttons: byId('buttons'),
};

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function setBanner(message: string | null): void {
  el.banner.textContent = message ?? '';
  el.banner.style.display = message ? 'block' : 'none';
}

const refreshPreview = debounce(150, () => {
  if (!state.item) return;
  el.overlay.src = isDirty(state)
    ? overlayUrl(state.item.sign_id, state.points)
    : overlayUrl(state.item.sign_id);
});

function renderMarkers(): void {
  el.markers.replaceChildren();
  state.points.forEach((p, i) => {
    const m = document.createElement('div');
    m.className = 'marker';
    m.style.left = `${p.x * ZOOM}px`;
    m.style.top = `${p.y * ZOOM}px`;
    m.textContent = String(i + 1);
    m.addEventListener('pointerdown', (ev) => startDrag(ev, i));
    el.markers.appendChild(m);
  });
}

function startDrag(down: PointerEvent, index: number): void {
  down.preventDefault();
  const bounds = {
    width: el.overlay.naturalWidth,
    height: el.overlay.naturalHeight,
  };
  const rect = el.stage.getBoundingClientRect();
  const onMove = (ev: PointerEvent) => {
    const x = (ev.clientX - rect.left) / ZOOM;
    const y = (ev.clientY - rect.top) / ZOOM;
    state = movePoint(state, index, x, y, bounds);
    renderMarkers();
    refreshPreview();
  };
  const onUp = () => {
    window.removeEventListener('pointermove', onMove);
    window.removeEventListener('pointerup', onUp);
    renderMeta();
  };
  window.addEventListener('pointermove', onMove);
  window.addEventListener('pointerup', onUp);
}

function renderMeta(): void {
  if (!state.item) {
    el.meta.textContent = '';
    return;
  }
  const dirty = isDirty(state) ? ' (edited)' : '';
  el.meta.textContent =
    `${state.item.sign_id} — ${state.item.class}` +
    ` — ${state.queueIndex + 1}/${state.queueTotal}${dirty}` +
    (state.item.note ? ` — ${state.item.note}` : '');
}

function renderQueue(): void {
  const view = queueView({
    total: queue.length,
    page: 0,
    page_size: queue.length,
    items: queue,
  });
  el.queue.replaceChildren();
  if (view.allVerified) {
    const done = document.createElement('div');
    done.className = 'all-verified';
    done.textContent = 'all verified';
    el.queue.appendChild(done);
    return;
  }
  view.rows.forEach((row, i) => {
    const li = document.createElement('div');
    li.className = 'row' + (i === state.queueIndex ? ' active' : '');
    li.textContent = `${row.sign_id}  ${row.class}  [${row.status}]`;
    li.addEventListener('click', () => showItem(i));
    el.queue.appendChild(li);
  });
}

function showItem(index: number): void {
  if (queue.length === 0) {
    state = emptyState();
    el.overlay.removeAttribute('src');
    el.markers.replaceChildren();
    renderQueue();
    renderMeta();
    return;
  }
  const i = Math.min(index, queue.length - 1);
  state = loadItem(queue[i], i, queue.length);
  el.overlay.src = overlayUrl(queue[i].sign_id);
  renderMarkers();
  renderQueue();
  renderMeta();
  setBanner(null);
}

async function refreshQueue(keepIndex = 0): Promise<void> {
  try {
    const page = await fetchItems('pending', 0, 200);
    queue = page.items;
    setBanner(null);
  } catch {
    setBanner('cannot reach review server');
    return;
  }
  showItem(keepIndex);
}

async function submit(action: SubmitAction): Promise<void> {
  if (!state.item) return;
  const payload = buildSubmit(state, action);
  if (typeof payload === 'string') {
    setBanner(payload);
    return;
  }
  const signId = state.item.sign_id;
  const index = state.queueIndex;
  // optimistic: drop the item locally, then reconcile on failure
  queue = queue.filter((it) => it.sign_id !== signId);
  showItem(index);
  try {
    await submitItem(signId, payload);
  } catch (err) {
    if (err instanceof ApiError && err.status === 409) {
      const fresh = await fetchItem(signId);
      if (fresh) {
        queue.splice(Math.min(index, queue.length), 0, fresh);
        state = rollback(state, fresh, 'conflict: reloaded from server');
        showItem(Math.min(index, queue.length - 1));
        setBanner('conflict: reloaded from server');
        return;
      }
    }
    const message = err instanceof Error ? err.message : String(err);
    setBanner(message);
    await refreshQueue(index);
  }
}

function skip(): void {
  if (queue.length === 0) return;
  showItem((state.queueIndex + 1) % queue.length);
}

function wireButtons(): void {
  const actions: [string, string, () => void][] = [
    ['accept', 'accept (a)', () => void submit('accept')],
    ['correct', 'correct (c)', () => void submit('correct')],
    ['reset', 'reset (r)', () => {
      state = resetPoints(state);
      renderMarkers();
      renderMeta();
      refreshPreview();
    }],
    ['skip', 'skip (s)', skip],
  ];
  for (const [id, label, fn] of actions) {
    const b = document.createElement('button');
    b.id = id;
    b.textContent = label;
    b.addEventListener('click', fn);
    el.buttons.appendChild(b);
  }
  window.addEventListener('keydown', (ev) => {
    if (ev.target instanceof HTMLInputElement) return;
    const key = ev.key.toLowerCase();
    if (key === 'a') void submit('accept');
    else if (key === 'c') void submit('correct');
    else if (key === 's') skip();
    else if (key === 'r') (byId('reset') as HTMLButtonElement).click();
  });
}

el.overlay.addEventListener('load', () => {
  el.overlay.style.width = `${el.overlay.naturalWidth * ZOOM}px`;
});

wireButtons();
void refreshQueue();

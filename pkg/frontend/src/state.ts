// Pure review-session state: no DOM, no fetch. The app layer owns side
// effects; everything here is a plain function so it can be unit tested.

export interface ReviewItem {
  sign_id: string;
  image_id: string;
  class: string;
  status: string;
  keypoints: number[][];
  note: string;
}

export interface ItemsPage {
  total: number;
  page: number;
  page_size: number;
  items: ReviewItem[];
}

export interface Point {
  x: number;
  y: number;
}

export interface Bounds {
  width: number;
  height: number;
}

export interface UiReviewState {
  item: ReviewItem | null;
  points: Point[]; // in-flight positions, image coordinates
  queueIndex: number;
  queueTotal: number;
  error: string | null;
}

export function emptyState(): UiReviewState {
  return { item: null, points: [], queueIndex: 0, queueTotal: 0, error: null };
}

export function loadItem(
  item: ReviewItem,
  queueIndex: number,
  queueTotal: number,
): UiReviewState {
  return {
    item,
    points: item.keypoints.map(([x, y]) => ({ x, y })),
    queueIndex,
    queueTotal,
    error: null,
  };
}

// Dirty iff any in-flight position differs from the served annotation.
export function isDirty(state: UiReviewState): boolean {
  if (!state.item) return false;
  return state.points.some((p, i) => {
    const [x, y] = state.item!.keypoints[i];
    return p.x !== x || p.y !== y;
  });
}

export function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

// Move one keypoint, snapping to the image bounds. Returns a new state;
// the input is not mutated.
export function movePoint(
  state: UiReviewState,
  index: number,
  x: number,
  y: number,
  bounds: Bounds,
): UiReviewState {
  if (index < 0 || index >= state.points.length) return state;
  const points = state.points.map((p, i) =>
    i === index
      ? { x: clamp(x, 0, bounds.width - 1), y: clamp(y, 0, bounds.height - 1) }
      : p,
  );
  return { ...state, points };
}

export function resetPoints(state: UiReviewState): UiReviewState {
  if (!state.item) return state;
  return {
    ...state,
    points: state.item.keypoints.map(([x, y]) => ({ x, y })),
  };
}

// Serialize provisional keypoints for the overlay preview query string.
export function kpQuery(points: Point[]): string {
  return points.map((p) => `${round3(p.x)},${round3(p.y)}`).join(',');
}

function round3(v: number): number {
  return Math.round(v * 1000) / 1000;
}

export function overlayUrl(signId: string, points?: Point[]): string {
  const base = `/items/${encodeURIComponent(signId)}/overlay.png`;
  if (!points || points.length === 0) return base;
  return `${base}?kp=${kpQuery(points)}`;
}

export type SubmitAction = 'accept' | 'correct';

export interface SubmitPayload {
  action: SubmitAction;
  keypoints?: number[][];
}

// Decide what to POST, or return an error string without touching the
// server. "correct" needs edited points; "accept" must not carry edits.
export function buildSubmit(
  state: UiReviewState,
  action: SubmitAction,
): SubmitPayload | string {
  if (!state.item) return 'no item loaded';
  if (action === 'accept') {
    if (isDirty(state)) return 'keypoints were edited; use correct or reset';
    return { action: 'accept' };
  }
  if (!isDirty(state)) return 'no edits to submit';
  if (state.points.length !== state.item.keypoints.length) {
    return `expected ${state.item.keypoints.length} keypoints`;
  }
  return { action: 'correct', keypoints: state.points.map((p) => [p.x, p.y]) };
}

// On Conflict the server state won; replace the in-flight edit with the
// refreshed item so the reviewer sees what is actually stored.
export function rollback(
  state: UiReviewState,
  fresh: ReviewItem,
  message: string,
): UiReviewState {
  const next = loadItem(fresh, state.queueIndex, state.queueTotal);
  return { ...next, error: message };
}

export interface QueueView {
  allVerified: boolean;
  rows: { sign_id: string; class: string; status: string; note: string }[];
  total: number;
}

export function queueView(page: ItemsPage): QueueView {
  return {
    allVerified: page.total === 0,
    rows: page.items.map((it) => ({
      sign_id: it.sign_id,
      class: it.class,
      status: it.status,
      note: it.note,
    })),
    total: page.total,
  };
}

// Trailing-edge debounce used for the preview re-render while dragging.
export function debounce<A extends unknown[]>(
  ms: number,
  fn: (...args: A) => void,
): (...args: A) => void {
  let timer: ReturnType<typeof setTimeout> | undefined;
  return (...args: A) => {
    if (timer !== undefined) clearTimeout(timer);
    timer = setTimeout(() => fn(...args), ms);
  };
}

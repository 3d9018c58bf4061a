// Thin fetch wrappers over the review-server HTTP contract. This is the
// only place the UI talks to the backend.

import type { ItemsPage, ReviewItem, SubmitPayload } from './state.js';

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
  ) {
    super(message);
  }
}

async function readError(res: Response): Promise<string> {
  try {
    const body = (await res.json()) as { error?: string };
    return body.error ?? res.statusText;
  } catch {
    return res.statusText;
  }
}

export async function fetchItems(
  status?: string,
  page = 0,
  pageSize = 50,
): Promise<ItemsPage> {
  const params = new URLSearchParams({
    page: String(page),
    page_size: String(pageSize),
  });
  if (status) params.set('status', status);
  const res = await fetch(`/items?${params}`);
  if (!res.ok) throw new ApiError(res.status, await readError(res));
  return (await res.json()) as ItemsPage;
}

export async function submitItem(
  signId: string,
  payload: SubmitPayload,
): Promise<void> {
  const res = await fetch(`/items/${encodeURIComponent(signId)}`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify(payload),
  });
  if (!res.ok) throw new ApiError(res.status, await readError(res));
}

// Refetch a single item after a conflict so the rollback shows the
// server's current annotation.
export async function fetchItem(signId: string): Promise<ReviewItem | null> {
  const page = await fetchItems(undefined, 0, 1000);
  return page.items.find((it) => it.sign_id === signId) ?? null;
}

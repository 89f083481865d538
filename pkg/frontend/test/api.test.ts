import { describe, expect, it } from 'vitest';

import { ApiClient, ApiRequestError, FetchLike } from '../src/api.js';

interface Recorded {
  method: string;
  path: string;
  headers: Record<string, string>;
  body: unknown;
}

function stubFetch(
  responder: (method: string, path: string) => { status: number; body: unknown },
): { fetch: FetchLike; calls: Recorded[] } {
  const calls: Recorded[] = [];
  const fetch: FetchLike = async (input, init) => {
    const url = new URL(input);
    const method = init?.method ?? 'GET';
    calls.push({
      method,
      path: url.pathname + url.search,
      headers: (init?.headers ?? {}) as Record<string, string>,
      body: init?.body ? JSON.parse(String(init.body)) : undefined,
    });
    const { status, body } = responder(method, url.pathname);
    return new Response(JSON.stringify(body), {
      status,
      headers: { 'Content-Type': 'application/json' },
    });
  };
  return { fetch, calls };
}

const SESSION = { baseUrl: 'http://api.test', token: 'tok-1', operator: 'sme' };

describe('ApiClient', () => {
  it('sends the bearer token on every call', async () => {
    const { fetch, calls } = stubFetch(() => ({ status: 200, body: { items: [] } }));
    const client = new ApiClient(SESSION, fetch);
    await client.listTriage();
    expect(calls[0].headers['Authorization']).toBe('Bearer tok-1');
    expect(calls[0].path).toBe('/v1/triage?status=pending');
  });

  it('refuses to mutate without a token', async () => {
    const { fetch, calls } = stubFetch(() => ({ status: 200, body: {} }));
    const client = new ApiClient({ ...SESSION, token: '' }, fetch);
    await expect(client.labelTriage('i1', { dismiss: true })).rejects.toMatchObject({
      code: 'missing_token',
    });
    expect(calls).toHaveLength(0); // nothing left the console
  });

  it('maps 409 responses to conflicts', async () => {
    const { fetch } = stubFetch(() => ({
      status: 409,
      body: { error: { code: 'conflict', message: 'already labeled' } },
    }));
    const client = new ApiClient(SESSION, fetch);
    try {
      await client.labelTriage('i1', { expert: 'policies' });
      expect.unreachable('should have thrown');
    } catch (error) {
      expect(error).toBeInstanceOf(ApiRequestError);
      expect((error as ApiRequestError).isConflict).toBe(true);
      expect((error as ApiRequestError).code).toBe('conflict');
    }
  });

  it('parses machine-readable error codes', async () => {
    const { fetch } = stubFetch(() => ({
      status: 404,
      body: { error: { code: 'not_found', message: 'no triage item' } },
    }));
    const client = new ApiClient(SESSION, fetch);
    await expect(client.getTriageItem('ghost')).rejects.toMatchObject({
      status: 404,
      code: 'not_found',
    });
  });

  it('labels with a corrected expert payload', async () => {
    const { fetch, calls } = stubFetch(() => ({ status: 200, body: { status: 'confirmed_error' } }));
    const client = new ApiClient(SESSION, fetch);
    await client.labelTriage('item-9', { expert: 'policies' });
    expect(calls[0].method).toBe('POST');
    expect(calls[0].path).toBe('/v1/triage/item-9/label');
    expect(calls[0].body).toEqual({ expert: 'policies' });
  });

  it('mutates through exactly the three declared endpoints', async () => {
    const { fetch, calls } = stubFetch(() => ({
      status: 200,
      body: { items: [], rollouts: {}, datasets: [] },
    }));
    const client = new ApiClient(SESSION, fetch);
    // Exercise the entire public surface.
    await client.listTriage();
    await client.getTriageItem('i1');
    await client.listRollouts();
    await client.listDatasets('router');
    await client.latestReport().catch(() => undefined);
    await client.labelTriage('i1', { dismiss: true });
    await client.approveRollout('router');
    await client.rollbackRollout('router');
    const mutations = calls.filter((call) => call.method !== 'GET');
    expect(mutations.map((call) => call.path).sort()).toEqual([
      '/v1/rollouts/router/approve',
      '/v1/rollouts/router/rollback',
      '/v1/triage/i1/label',
    ]);
  });
});
